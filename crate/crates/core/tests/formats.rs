use proptest::prelude::*;

use pcguide::circuit::serialize;
use pcguide::datasets::{generate, Generator, ToyDatasetSpec};
use pcguide::format::image::{read_pgm, write_pgm};
use pcguide::latent::PatchCodebook;
use pcguide::learning::{build_pd_circuit, Dataset, PdStructureConfig};
use pcguide::Circuit64;

#[test]
fn artifacts_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PdStructureConfig { height: 4, width: 4, num_cats: 3, sums_per_region: 2, tie_leaf_params: true, ..Default::default() };
    let (c, _) = build_pd_circuit::<f64>(&cfg).unwrap();
    let path = dir.path().join("model.pcir");
    serialize::save(&c, &path).unwrap();
    let back: Circuit64 = serialize::load(&path).unwrap();
    assert_eq!(serialize::to_bytes(&back), std::fs::read(&path).unwrap());
    assert_eq!(back.all_params(), c.all_params());

    let data = generate(&ToyDatasetSpec::new(Generator::Mixture, 4, 4, 30, 1)).unwrap();
    let dpath = dir.path().join("data.pcds");
    data.save(&dpath).unwrap();
    assert_eq!(Dataset::load(&dpath).unwrap(), data);
    assert_eq!(Dataset::from_csv(&data.to_csv(), Some(2)).unwrap(), data);

    let cb = PatchCodebook::train(&data, 4, 4, 2, 2, 3, 0).unwrap();
    let cpath = dir.path().join("codes.pccb");
    cb.save(&cpath).unwrap();
    let cb2 = PatchCodebook::load(&cpath).unwrap();
    assert_eq!(cb2, cb);
    assert_eq!(cb2.to_bytes(), std::fs::read(&cpath).unwrap());
}

#[test]
fn truncated_files_are_errors_not_panics() {
    let (c, _) = build_pd_circuit::<f64>(&PdStructureConfig { height: 2, width: 2, ..Default::default() }).unwrap();
    let bytes = serialize::to_bytes(&c);
    for cut in [0, 3, 8, 20, bytes.len() - 1] {
        assert!(serialize::read_circuit::<f64>(&mut &bytes[..cut]).is_err());
    }
}

proptest! {
    #[test]
    fn pgm_round_trips(pixels in prop::collection::vec(0u16..4, 12)) {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 3, 4, &pixels, 4).unwrap();
        let (h, w, back) = read_pgm(&mut buf.as_slice(), 4).unwrap();
        prop_assert_eq!((h, w), (3, 4));
        prop_assert_eq!(back, pixels);
    }
}
