//! Poon-Domingos style region-split circuits over an image grid.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::LearningError;
use crate::circuit::{Circuit, CircuitBuilder, NodeId, Rect, ScopePartition};
use crate::rng::{seeded, Rng};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdStructureConfig {
    pub height: usize,
    pub width: usize,
    pub num_cats: usize,
    /// Sum nodes per region, and input nodes per pixel.
    pub sums_per_region: usize,
    /// Regions this many splits below the root become fully factorized
    /// mixtures instead of splitting further. `None` splits down to pixels.
    pub max_split_depth: Option<usize>,
    /// Share parameters across positions for every 1×1 and 2×2 region.
    pub tie_leaf_params: bool,
    pub init_seed: u64,
}

impl Default for PdStructureConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            num_cats: 2,
            sums_per_region: 2,
            max_split_depth: None,
            tie_leaf_params: false,
            init_seed: 0,
        }
    }
}

struct Pd<'a, T> {
    cfg: &'a PdStructureConfig,
    b: CircuitBuilder<T>,
    part: ScopePartition,
    memo: HashMap<(Rect, bool), Vec<NodeId>>,
    /// First input node per mixture index, for tied pixels.
    leaf_proto: Vec<NodeId>,
    /// First sum node per mixture index among 2×2 regions.
    quad_proto: Vec<NodeId>,
    rng: Rng,
}

fn dirichlet_one<T: Real>(n: usize, rng: &mut Rng) -> Vec<T> {
    let g = Gamma::<f64>::new(1.0, 1.0).expect("valid gamma");
    let raw: Vec<f64> = (0..n).map(|_| g.sample(rng).max(1e-300)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::of(v / s)).collect()
}

fn uniform_init<T: Real>(n: usize, rng: &mut Rng) -> Vec<T> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::of(v / s)).collect()
}

impl<T: Real> Pd<'_, T> {
    fn var(&self, row: usize, col: usize) -> u32 {
        (row * self.cfg.width + col) as u32
    }

    fn pixel(&mut self, r: Rect) -> Vec<NodeId> {
        let var = self.var(r.row, r.col);
        let k = self.cfg.sums_per_region;
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let id = if self.cfg.tie_leaf_params && i < self.leaf_proto.len() {
                self.b.input_tied(var, self.leaf_proto[i])
            } else {
                let d = uniform_init(self.cfg.num_cats, &mut self.rng);
                let id = self.b.input(var, &d);
                if self.cfg.tie_leaf_params {
                    self.leaf_proto.push(id);
                }
                id
            };
            self.part.set(id, r);
            out.push(id);
        }
        out
    }

    fn mix(&mut self, r: Rect, products: &[NodeId], count: usize, tie_quad: bool) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let id = if tie_quad && i < self.quad_proto.len() {
                self.b.sum_tied(products, self.quad_proto[i])
            } else {
                let w = dirichlet_one(products.len(), &mut self.rng);
                let id = self.b.sum(products, &w);
                if tie_quad {
                    self.quad_proto.push(id);
                }
                id
            };
            self.part.set(id, r);
            out.push(id);
        }
        out
    }

    fn region(&mut self, r: Rect, depth: usize, is_root: bool) -> Vec<NodeId> {
        if r.area() == 1 {
            if let Some(v) = self.memo.get(&(r, false)) {
                return v.clone();
            }
            let v = self.pixel(r);
            self.memo.insert((r, false), v.clone());
            return v;
        }
        let factorized = self.cfg.max_split_depth.is_some_and(|d| depth >= d);
        if !is_root {
            if let Some(v) = self.memo.get(&(r, factorized)) {
                return v.clone();
            }
        }
        let mut products = Vec::new();
        if factorized {
            let pixels: Vec<Vec<NodeId>> = (r.row..r.row + r.height)
                .flat_map(|row| (r.col..r.col + r.width).map(move |col| Rect::new(row, col, 1, 1)))
                .map(|p| self.region(p, depth + 1, false))
                .collect();
            for i in 0..self.cfg.sums_per_region {
                let kids: Vec<NodeId> = pixels.iter().map(|p| p[i]).collect();
                let id = self.b.product(&kids);
                self.part.set(id, r);
                products.push(id);
            }
        } else {
            for split in [r.split_rows(), r.split_cols()].into_iter().flatten() {
                let a = self.region(split.0, depth + 1, false);
                let b = self.region(split.1, depth + 1, false);
                for &x in &a {
                    for &y in &b {
                        let id = self.b.product(&[x, y]);
                        self.part.set(id, r);
                        products.push(id);
                    }
                }
            }
        }
        let count = if is_root { 1 } else { self.cfg.sums_per_region };
        let tie_quad = self.cfg.tie_leaf_params && !is_root && !factorized && r.height == 2 && r.width == 2;
        let v = self.mix(r, &products, count, tie_quad);
        if !is_root {
            self.memo.insert((r, factorized), v.clone());
        }
        v
    }
}

/// Builds the region-split circuit; every node's scope is an axis-aligned patch,
/// recorded in the returned partition. Variables are pixels in row-major order.
pub fn build_pd_circuit<T: Real>(cfg: &PdStructureConfig) -> Result<(Circuit<T>, ScopePartition), LearningError> {
    if cfg.height < 2 || cfg.width < 2 {
        return Err(LearningError::GridTooSmall { height: cfg.height, width: cfg.width });
    }
    if cfg.sums_per_region == 0 || cfg.num_cats == 0 {
        return Err(LearningError::InvalidConfig("sums_per_region and num_cats must be positive".into()));
    }
    let mut pd = Pd {
        cfg,
        b: CircuitBuilder::new(cfg.height * cfg.width, cfg.num_cats),
        part: ScopePartition::new(cfg.height, cfg.width),
        memo: HashMap::new(),
        leaf_proto: Vec::new(),
        quad_proto: Vec::new(),
        rng: seeded(cfg.init_seed),
    };
    let root = pd.region(Rect::new(0, 0, cfg.height, cfg.width), 0, true);
    debug_assert_eq!(root.len(), 1);
    let circuit = pd.b.build().map_err(|e| LearningError::InvalidConfig(e.to_string()))?;
    Ok((circuit, pd.part))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: usize, w: usize, k: usize, tie: bool) -> PdStructureConfig {
        PdStructureConfig { height: h, width: w, num_cats: 2, sums_per_region: k, tie_leaf_params: tie, ..Default::default() }
    }

    #[test]
    fn smallest_instance_ties_all_pixels() {
        let (c, _) = build_pd_circuit::<f64>(&cfg(2, 2, 1, true)).unwrap();
        let r = c.validate();
        assert!(r.is_valid() && r.is_alternating(), "{r:?}");
        let inputs: Vec<NodeId> = c.inputs_by_var().into_iter().flatten().collect();
        assert_eq!(inputs.len(), 4);
        let starts: Vec<usize> = inputs.iter().map(|&n| c.param_start(n).unwrap()).collect();
        assert!(starts.iter().all(|&s| s == starts[0]));
    }

    #[test]
    fn grid_too_small() {
        assert_eq!(
            build_pd_circuit::<f64>(&cfg(1, 5, 1, false)).unwrap_err(),
            LearningError::GridTooSmall { height: 1, width: 5 }
        );
    }

    #[test]
    fn products_tile_their_boxes() {
        for (h, w, k) in [(4, 4, 2), (3, 5, 2), (4, 4, 1)] {
            let (c, part) = build_pd_circuit::<f64>(&cfg(h, w, k, false)).unwrap();
            assert!(c.validate().is_valid());
            assert_eq!(part.check_tiling(&c), Ok(()));
            assert_eq!(part.check_scopes(&c), Ok(()));
        }
    }

    #[test]
    fn quads_share_sum_blocks_when_tied() {
        let (c, part) = build_pd_circuit::<f64>(&cfg(4, 4, 2, true)).unwrap();
        assert!(c.validate().is_valid());
        let quad_sums: Vec<NodeId> = (0..c.num_nodes() as NodeId)
            .filter(|&n| c.kind(n) == crate::NodeKind::Sum)
            .filter(|&n| part.box_of(n).is_some_and(|b| b.height == 2 && b.width == 2))
            .collect();
        let blocks: std::collections::BTreeSet<usize> = quad_sums.iter().map(|&n| c.param_start(n).unwrap()).collect();
        assert!(quad_sums.len() > 2);
        assert_eq!(blocks.len(), 2);
    }

    #[test]
    fn depth_cap_factorizes() {
        let mut c0 = cfg(8, 8, 2, false);
        let full = build_pd_circuit::<f64>(&c0).unwrap().0;
        c0.max_split_depth = Some(2);
        let (capped, part) = build_pd_circuit::<f64>(&c0).unwrap();
        assert!(capped.validate().is_valid());
        assert_eq!(part.check_tiling(&capped), Ok(()));
        assert!(capped.num_edges() < full.num_edges());
    }

    #[test]
    fn latent_sized_grid_builds() {
        let c = PdStructureConfig { height: 16, width: 16, num_cats: 1024, sums_per_region: 1, ..Default::default() };
        let (circuit, _) = build_pd_circuit::<f32>(&c).unwrap();
        assert_eq!(circuit.num_vars(), 256);
        assert_eq!(circuit.num_cats(), 1024);
        assert!(circuit.validate().is_valid());
    }
}
