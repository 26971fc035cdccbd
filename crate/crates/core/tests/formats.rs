use episdf::diff::checkpoint::{decode, encode, NamedArray};
use episdf::formats::{
    encode_pfm, encode_pgm, encode_ppm, format_bbox, format_obj, parse_bbox, parse_obj, parse_pfm, parse_pgm, parse_ppm,
};
use episdf::geometry::{parse_cameras, BoundingBox};
use episdf::trainer::TrainConfig;
use episdf::Error;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL
}

fn named_array() -> impl Strategy<Value = NamedArray> {
    ("[a-z][a-z0-9_.]{0,12}", prop::collection::vec(1usize..4, 1..4)).prop_flat_map(|(name, shape)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f64>(), n).prop_map(move |values| NamedArray {
            name: name.clone(),
            shape: shape.clone(),
            values,
        })
    })
}

proptest! {
    #[test]
    fn checkpoint_round_trips_bitwise(records in prop::collection::vec(named_array(), 0..5)) {
        let back = decode(&encode(&records)).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.values), bits(&b.values));
        }
    }

    #[test]
    fn truncated_checkpoints_are_rejected(records in prop::collection::vec(named_array(), 1..3), cut in 1usize..64) {
        let bytes = encode(&records);
        let keep = bytes.len().saturating_sub(cut).max(5);
        // cuts on a record boundary leave a valid, shorter checkpoint
        let boundaries: Vec<usize> = (0..=records.len()).map(|k| encode(&records[..k]).len()).collect();
        prop_assume!(!boundaries.contains(&keep));
        prop_assert!(matches!(decode(&bytes[..keep]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn netpbm_round_trips(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let px = |n: usize| (0..n).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect::<Vec<u8>>();
        let rgb = px(w * h * 3);
        prop_assert_eq!(parse_ppm(&encode_ppm(w, h, &rgb), "a.ppm").unwrap(), (w, h, rgb));
        let gray = px(w * h);
        prop_assert_eq!(parse_pgm(&encode_pgm(w, h, &gray), "a.pgm").unwrap(), (w, h, gray));
    }

    #[test]
    fn pfm_round_trips_any_floats(w in 1usize..6, h in 1usize..6, vals in prop::collection::vec(any::<f32>(), 36)) {
        let v = vals[..w * h].to_vec();
        let (pw, ph, back) = parse_pfm(&encode_pfm(w, h, &v), "a.pfm").unwrap();
        prop_assert_eq!((pw, ph), (w, h));
        prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn bbox_round_trips(lo in prop::array::uniform3(-1e6f64..1e6), ext in prop::array::uniform3(1e-6f64..1e6)) {
        let hi = [0, 1, 2].map(|i| lo[i] + ext[i]);
        prop_assume!((0..3).all(|i| hi[i] > lo[i]));
        let b = BoundingBox::new(lo, hi).unwrap();
        prop_assert_eq!(parse_bbox(&format_bbox(&b), "bbox.txt").unwrap(), b);
    }

    #[test]
    fn obj_round_trips(
        verts in prop::collection::vec(prop::array::uniform3(finite()), 1..20),
        faces in prop::collection::vec(prop::array::uniform3(0usize..1000), 0..20),
    ) {
        let faces: Vec<[usize; 3]> = faces.iter().map(|f| f.map(|i| i % verts.len())).collect();
        let (v, f) = parse_obj(&format_obj(&verts, &faces), "m.obj").unwrap();
        prop_assert_eq!(v, verts);
        prop_assert_eq!(f, faces);
    }

    #[test]
    fn config_round_trips(
        iterations in 0usize..100_000,
        lr in 1e-8f64..1.0,
        lambda3 in 0.0f64..10.0,
        seed in any::<u64>(),
        residual in any::<bool>(),
    ) {
        let mut cfg = TrainConfig::default();
        cfg.iterations = iterations;
        cfg.learning_rate = lr;
        cfg.weights.lambda3 = lambda3;
        cfg.seed = seed;
        cfg.model.residual = residual;
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text(), "c.txt").unwrap(), cfg);
    }

    #[test]
    fn decoders_never_panic_on_arbitrary_input(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
        let _ = parse_ppm(&bytes, "x");
        let _ = parse_pgm(&bytes, "x");
        let _ = parse_pfm(&bytes, "x");
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_bbox(&text, "x");
        let _ = parse_obj(&text, "x");
        let _ = parse_cameras(&text, "x");
        let _ = TrainConfig::parse(&text, "x");
    }

    #[test]
    fn checkpoint_decoder_survives_corrupted_headers(mut bytes in prop::collection::vec(any::<u8>(), 5..128)) {
        bytes[..5].copy_from_slice(b"EPIS1");
        let _ = decode(&bytes);
    }
}

#[test]
fn parse_errors_name_file_and_line() {
    let err = parse_bbox("0 0 0\n1 x 1\n", "bbox.txt").unwrap_err();
    assert!(err.to_string().contains("bbox.txt:2"), "{err}");
    let err = parse_obj("v 0 0 0\nf 1 2\n", "m.obj").unwrap_err();
    assert!(err.to_string().contains("m.obj:2"), "{err}");
    let err = TrainConfig::parse("iterations = 5\nlearning_rate = fast\n", "c.txt").unwrap_err();
    assert!(err.to_string().contains("c.txt:2"), "{err}");
    assert!(parse_ppm(b"P6\n2 2\n255\n\x00", "a.ppm").is_err());
    assert!(decode(b"EPIS2").is_err());
}

#[test]
fn fuzz_seeds_are_accepted() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let seeds = |t: &str| {
        let mut files: Vec<_> = std::fs::read_dir(root.join(t))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        assert!(!files.is_empty(), "{t}");
        files
            .into_iter()
            .map(|p| (p.display().to_string(), std::fs::read(p).unwrap()))
    };
    let text = |b: &[u8]| String::from_utf8(b.to_vec()).unwrap();
    for (f, b) in seeds("checkpoint") {
        decode(&b).expect(&f);
    }
    for (f, b) in seeds("cameras") {
        parse_cameras(&text(&b), &f).unwrap();
    }
    for (f, b) in seeds("ppm") {
        parse_ppm(&b, &f).unwrap();
    }
    for (f, b) in seeds("pgm") {
        parse_pgm(&b, &f).unwrap();
    }
    for (f, b) in seeds("pfm") {
        parse_pfm(&b, &f).unwrap();
    }
    for (f, b) in seeds("bbox") {
        parse_bbox(&text(&b), &f).unwrap();
    }
    for (f, b) in seeds("config") {
        TrainConfig::parse(&text(&b), &f).unwrap();
    }
    for (f, b) in seeds("obj") {
        parse_obj(&text(&b), &f).unwrap();
    }
}
