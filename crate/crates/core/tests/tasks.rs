use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use unicontrol::grad::Tensor;
use unicontrol::tasks::*;

const GOLDEN: &str = "tests/data/instruction_embeddings.bin";

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(GOLDEN)
}

/// Independent reimplementation of the encoder pipeline: FNV-1a 64,
/// SplitMix64, Box-Muller from the top 53 bits, per-token normalisation,
/// mean, renormalisation.
mod oracle {
    fn fnv1a(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    struct SplitMix(u64);

    impl SplitMix {
        fn next(&mut self) -> u64 {
            self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        }
    }

    fn unit(bits: u64) -> f64 {
        (bits >> 11) as f64 / 9_007_199_254_740_992.0
    }

    fn norm(v: &mut [f64]) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    }

    pub fn encode(s: &str) -> Vec<f64> {
        let toks: Vec<String> = s.split_whitespace().map(|t| t.to_lowercase()).collect();
        let mut acc = vec![0.0; 64];
        for t in &toks {
            let mut sm = SplitMix(fnv1a(t.as_bytes()));
            let mut v = Vec::with_capacity(64);
            for _ in 0..32 {
                let (a, b) = (sm.next(), sm.next());
                let r = (-2.0 * (1.0 - unit(a)).ln()).sqrt();
                let th = 2.0 * std::f64::consts::PI * unit(b);
                v.push(r * th.cos());
                v.push(r * th.sin());
            }
            norm(&mut v);
            for (a, x) in acc.iter_mut().zip(&v) {
                *a += x / toks.len() as f64;
            }
        }
        norm(&mut acc);
        acc
    }

    pub fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

#[test]
fn instruction_strings() {
    assert_eq!(instruction_for("hed").unwrap(), "hed edge to image");
    assert_eq!(instruction_for("outpainting").unwrap(), "image outpainting");
    assert_eq!(instruction_for("canny").unwrap(), "canny edge to image");
    let err = instruction_for("watercolor").unwrap_err().to_string();
    assert!(err.contains("watercolor"), "{err}");
    let keys: Vec<&str> = registry().iter().map(|t| t.key).collect();
    assert_eq!(keys, ["hed", "canny", "seg", "depth", "normal", "pose", "hedsketch", "bbox", "outpainting"]);
    for (i, t) in registry().iter().enumerate() {
        assert_eq!(t.adapter_index, i);
    }
}

#[test]
fn registry_round_trip() {
    let text = registry_to_tsv(registry());
    assert_eq!(registry_from_tsv(&text).unwrap(), registry());
}

#[test]
fn encoder_matches_independent_oracle() {
    for s in ["canny edge to image", "Hello  World", "a red circle on black", "x"] {
        let got = encode_text(s);
        let want = oracle::encode(s);
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{s}");
        }
    }
    assert!(encode_text("").iter().all(|&v| v == 0.0));
    assert!(encode_text("   ").iter().all(|&v| v == 0.0));
}

#[test]
fn edge_instructions_are_closer_to_each_other() {
    let c = oracle::encode("canny edge to image");
    let near = oracle::cos(&c, &oracle::encode("hed edge to image"));
    let far = oracle::cos(&c, &oracle::encode("image outpainting"));
    assert!(near > far);
    let e = encode_text("canny edge to image");
    assert!(cosine(&e, &encode_text("hed edge to image")) > cosine(&e, &encode_text("image outpainting")));
    assert!((cosine(&e, &encode_text("hed edge to image")) - near).abs() < 1e-6);
}

proptest! {
    #[test]
    fn embeddings_are_unit_and_deterministic(s in "[a-zA-Z ]{0,40}") {
        let a = encode_text(&s);
        let b = encode_text(&s);
        prop_assert_eq!(a.len(), EMBED_DIM);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let n = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if s.trim().is_empty() {
            prop_assert_eq!(n, 0.0);
        } else {
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_are_convex(s in "[a-z ]{1,30}", raw in prop::collection::vec(0.0f64..5.0, 9)) {
        if let Ok(w) = estimate_task_weights(&s, &WeightMode::Similarity, registry()) {
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        if raw.iter().sum::<f64>() > 0.0 {
            let w = estimate_task_weights(&s, &WeightMode::Manual(raw), registry()).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn colorization_weights_are_kept() {
    let w = parse_weight_spec("depth=0.6,seg=0.3,canny=0.1", registry()).unwrap();
    let got = estimate_task_weights("image colorization", &WeightMode::Manual(w.clone()), registry()).unwrap();
    assert_eq!(got, w);
    assert_eq!(got[3], 0.6);
    assert_eq!(got[2], 0.3);
    assert_eq!(got[1], 0.1);
    assert!(estimate_task_weights("x", &WeightMode::Manual(vec![0.0; 9]), registry()).is_err());
    assert!(WeightMode::parse("vibes", None).is_err());
    assert!(parse_weight_spec("depth=abc", registry()).is_err());
    assert!(parse_weight_spec("watercolor=1", registry()).is_err());
}

#[test]
fn registered_instruction_is_its_own_argmax() {
    for t in registry() {
        let w = estimate_task_weights(t.instruction, &WeightMode::Similarity, registry()).unwrap();
        let best = (0..9).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        assert_eq!(registry()[best].key, t.key);
    }
}

#[test]
fn sketch_similarity_weights_match_oracle() {
    let w = estimate_task_weights("sketch to image", &WeightMode::Similarity, registry()).unwrap();
    let e = oracle::encode("sketch to image");
    let raw: Vec<f64> = registry()
        .iter()
        .map(|t| oracle::cos(&e, &oracle::encode(t.instruction)).max(0.0))
        .collect();
    let s: f64 = raw.iter().sum();
    for (g, r) in w.iter().zip(&raw) {
        assert!((g - r / s).abs() < 1e-6);
    }
}

#[test]
fn hybrid_composition() {
    let a = Tensor::full([3, 8, 8], 0.5);
    let b = Tensor::full([3, 8, 8], -0.5);
    let h = compose_hybrid("seg", &a, "pose", &b, "a man in a park").unwrap();
    assert_eq!(h.instruction, "segmentation map and human skeleton to image");
    assert!(h.prompt.contains("background") && h.prompt.contains("foreground"));
    assert!(h.prompt.starts_with("a man in a park"));
    assert_eq!(h.branches.len(), 2);
    assert_eq!((h.branches[0].0, h.branches[0].1), ("seg", 0.5));
    assert_eq!((h.branches[1].0, h.branches[1].1), ("pose", 0.5));
    assert!(compose_hybrid("seg", &a, "pose", &Tensor::zeros([3, 4, 4]), "p").is_err());
    assert!(compose_hybrid("seg", &a, "nope", &b, "p").is_err());
}

#[test]
fn golden_embeddings_match_bitwise() {
    let bytes = fs::read(golden_path()).expect("golden file present; regenerate with --ignored");
    let table = read_embedding_table(&mut bytes.as_slice()).unwrap();
    assert_eq!(table.len(), 9);
    for ((key, emb), t) in table.iter().zip(registry()) {
        assert_eq!(key, t.key);
        let now = encode_text(t.instruction);
        assert!(emb.iter().zip(&now).all(|(a, b)| a.to_bits() == b.to_bits()), "{key}");
    }
    let mut again = Vec::new();
    write_embedding_table(&mut again, registry()).unwrap();
    assert_eq!(again, bytes);
    assert!(read_embedding_table(&mut &bytes[..bytes.len() - 3]).is_err());
}

#[test]
#[ignore = "rewrites the checked-in golden file"]
fn regenerate_golden_embeddings() {
    let mut out = Vec::new();
    write_embedding_table(&mut out, registry()).unwrap();
    fs::write(golden_path(), out).unwrap();
}
