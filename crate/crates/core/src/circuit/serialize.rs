//! `PCIR` binary circuit files and the JSON debug mirror.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "PCIR" | version u32 | num_nodes u32 | num_edges u32 | num_vars u32 | num_cats u32
//! | num_params u32 | root u32
//! node table:  num_nodes × { kind u8 (0 input, 1 product, 2 sum) | var u32 | child_start u32 | param_start u32 }
//! edge array:  num_edges × u32 child id
//! parameters:  num_params × f64 (value space)
//! ```
//!
//! Child ranges are `child_start[n]..child_start[n + 1]` with the last range
//! ending at `num_edges`. `var` and `param_start` are `0xFFFF_FFFF` when unused.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Circuit, NodeId, NodeKind, NONE};
use crate::format::{checked_len, read_f64, read_magic, read_u32, read_u8, write_u32, FormatError};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"PCIR";
pub const VERSION: u32 = 1;

pub fn write_circuit<T: Real>(c: &Circuit<T>, w: &mut impl Write) -> Result<(), FormatError> {
    let mut buf = Vec::with_capacity(32 + c.num_nodes() * 13 + c.num_edges() * 4 + c.all_params().len() * 8);
    buf.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        c.num_nodes() as u32,
        c.num_edges() as u32,
        c.num_vars() as u32,
        c.num_cats() as u32,
        c.all_params().len() as u32,
        c.root(),
    ] {
        write_u32(&mut buf, v)?;
    }
    for n in 0..c.num_nodes() {
        let (tag, var) = match c.kinds()[n] {
            NodeKind::Input { var } => (0u8, var),
            NodeKind::Product => (1, NONE),
            NodeKind::Sum => (2, NONE),
        };
        buf.push(tag);
        write_u32(&mut buf, var)?;
        write_u32(&mut buf, c.child_starts()[n])?;
        write_u32(&mut buf, c.param_starts()[n])?;
    }
    for &ch in c.edge_array() {
        write_u32(&mut buf, ch)?;
    }
    for p in c.all_params() {
        buf.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_circuit<T: Real>(r: &mut impl Read) -> Result<Circuit<T>, FormatError> {
    read_magic(r, MAGIC)?;
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let num_nodes = checked_len(read_u32(r)? as u64, "node")?;
    let num_edges = checked_len(read_u32(r)? as u64, "edge")?;
    let num_vars = read_u32(r)? as usize;
    let num_cats = read_u32(r)? as usize;
    let num_params = checked_len(read_u32(r)? as u64, "parameter")?;
    let root = read_u32(r)?;

    let mut kinds = Vec::with_capacity(num_nodes);
    let mut child_start = Vec::with_capacity(num_nodes + 1);
    let mut param_start = Vec::with_capacity(num_nodes);
    for _ in 0..num_nodes {
        let tag = read_u8(r)?;
        let var = read_u32(r)?;
        kinds.push(match tag {
            0 => NodeKind::Input { var },
            1 => NodeKind::Product,
            2 => NodeKind::Sum,
            t => return Err(FormatError::Malformed(format!("unknown node kind {t}"))),
        });
        child_start.push(read_u32(r)?);
        param_start.push(read_u32(r)?);
    }
    child_start.push(num_edges as u32);
    if child_start.windows(2).any(|w| w[0] > w[1]) {
        return Err(FormatError::Malformed("child offsets are not monotone".into()));
    }
    let mut children = Vec::with_capacity(num_edges);
    for _ in 0..num_edges {
        children.push(read_u32(r)?);
    }
    let mut params = Vec::with_capacity(num_params);
    for _ in 0..num_params {
        params.push(T::of(read_f64(r)?));
    }
    let c = Circuit::from_parts(num_vars, num_cats, kinds, child_start, children, param_start, params)
        .map_err(|e| FormatError::Malformed(e.to_string()))?;
    if c.root() != root {
        return Err(FormatError::Malformed(format!("header root {root} but structure root {}", c.root())));
    }
    Ok(c)
}

pub fn to_bytes<T: Real>(c: &Circuit<T>) -> Vec<u8> {
    let mut v = Vec::new();
    write_circuit(c, &mut v).expect("writing to memory");
    v
}

pub fn save<T: Real>(c: &Circuit<T>, path: impl AsRef<std::path::Path>) -> Result<(), FormatError> {
    std::fs::write(path, to_bytes(c))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<std::path::Path>) -> Result<Circuit<T>, FormatError> {
    let bytes = std::fs::read(path)?;
    read_circuit(&mut bytes.as_slice())
}

/// JSON mirror of the binary content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitDoc {
    pub version: u32,
    pub num_vars: usize,
    pub num_cats: usize,
    pub root: NodeId,
    pub nodes: Vec<NodeDoc>,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub kind: NodeKind,
    pub children: Vec<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub param_start: Option<u32>,
}

impl CircuitDoc {
    pub fn from_circuit<T: Real>(c: &Circuit<T>) -> Self {
        let nodes = (0..c.num_nodes() as NodeId)
            .map(|n| NodeDoc {
                kind: c.kind(n),
                children: c.children(n).to_vec(),
                param_start: c.param_start(n).map(|s| s as u32),
            })
            .collect();
        Self {
            version: VERSION,
            num_vars: c.num_vars(),
            num_cats: c.num_cats(),
            root: c.root(),
            nodes,
            params: c.all_params().iter().map(|p| p.to_f64_lossy()).collect(),
        }
    }

    pub fn to_circuit<T: Real>(&self) -> Result<Circuit<T>, FormatError> {
        let mut kinds = Vec::with_capacity(self.nodes.len());
        let mut child_start = vec![0u32];
        let mut children = Vec::new();
        let mut param_start = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            kinds.push(n.kind);
            children.extend_from_slice(&n.children);
            child_start.push(children.len() as u32);
            param_start.push(n.param_start.unwrap_or(NONE));
        }
        let params = self.params.iter().map(|&p| T::of(p)).collect();
        Circuit::from_parts(self.num_vars, self.num_cats, kinds, child_start, children, param_start, params)
            .map_err(|e| FormatError::Malformed(e.to_string()))
    }
}

pub fn to_json<T: Real>(c: &Circuit<T>) -> String {
    serde_json::to_string_pretty(&CircuitDoc::from_circuit(c)).expect("circuit docs serialize")
}

pub fn from_json<T: Real>(s: &str) -> Result<Circuit<T>, FormatError> {
    let doc: CircuitDoc = serde_json::from_str(s)?;
    doc.to_circuit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_circuit, RandomCircuitSpec};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn binary_and_json_round_trip(seed in any::<u64>(), nv in 1usize..12, cats in 2usize..5) {
            let spec = RandomCircuitSpec { num_vars: nv, num_cats: cats, ..RandomCircuitSpec::default() };
            let c: Circuit<f64> = random_circuit(&spec, &mut crate::rng::seeded(seed));
            let bytes = to_bytes(&c);
            let back: Circuit<f64> = read_circuit(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(to_bytes(&back), bytes.clone());
            let via_json: Circuit<f64> = from_json(&to_json(&c)).unwrap();
            prop_assert_eq!(to_bytes(&via_json), bytes);
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let c = crate::circuit::tests::figure_two_like();
        let mut bytes = to_bytes(&c);
        bytes[0] = b'X';
        assert!(matches!(read_circuit::<f64>(&mut bytes.as_slice()), Err(FormatError::BadMagic { .. })));
        let mut bytes = to_bytes(&c);
        bytes[4] = 9;
        assert!(matches!(read_circuit::<f64>(&mut bytes.as_slice()), Err(FormatError::UnsupportedVersion(9))));
        let bytes = to_bytes(&c);
        assert!(matches!(read_circuit::<f64>(&mut &bytes[..bytes.len() - 3]), Err(FormatError::Io(_))));
    }

    #[test]
    fn f32_circuits_round_trip_through_f64_storage() {
        let c: Circuit<f32> = crate::circuit::tests::figure_two_like().cast();
        let bytes = to_bytes(&c);
        let back: Circuit<f32> = read_circuit(&mut bytes.as_slice()).unwrap();
        assert_eq!(to_bytes(&back), bytes);
    }
}
