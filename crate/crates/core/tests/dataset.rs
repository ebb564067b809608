use hydraview::dataset::{
    frame_targets, generate_synthetic, read_sequence, split_windows, window_count, write_sequence,
    DatasetManifest, GroundTruthSegment, SkeletonSequence, SkeletonTopology, SynthConfig,
};
use hydraview::geometry::torso_planes;
use proptest::prelude::*;

fn small_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        classes: 4,
        sequences: 10,
        ..SynthConfig::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic(&small_cfg(3)).unwrap();
    let b = generate_synthetic(&small_cfg(3)).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&small_cfg(4)).unwrap();
    assert_ne!(a[0].positions, c[0].positions);
}

#[test]
fn every_class_appears() {
    let seqs = generate_synthetic(&small_cfg(11)).unwrap();
    for k in 0..4 {
        assert!(seqs.iter().any(|s| s.segments.iter().any(|g| g.class == k)), "class {k}");
    }
    for s in &seqs {
        assert_eq!(s.num_frames(), 384);
        let mut segs = s.segments.clone();
        segs.sort_by_key(|g| g.start);
        for w in segs.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
    }
}

#[test]
fn class_bank_limits() {
    let mut cfg = small_cfg(0);
    cfg.classes = 99;
    assert!(generate_synthetic(&cfg).is_err());
    cfg.classes = 1;
    assert!(generate_synthetic(&cfg).is_err());
    cfg.classes = 8;
    cfg.sequences = 4;
    assert!(generate_synthetic(&cfg).is_ok());
    cfg.joints = 4;
    assert!(generate_synthetic(&cfg).is_err());
}

#[test]
fn idle_windows_have_empty_targets() {
    let seqs = generate_synthetic(&small_cfg(5)).unwrap();
    let s = &seqs[0];
    let t = frame_targets(s, 16, 16).unwrap();
    let labels = s.frame_labels();
    let mut idle_rows = 0;
    for w in 0..t.shape()[0] {
        let span = w * 16..((w + 1) * 16).min(s.num_frames());
        if span.clone().all(|f| labels[f].is_empty()) {
            idle_rows += 1;
            assert!(t.data()[w * 4..(w + 1) * 4].iter().all(|&v| v == 0.0));
        }
    }
    assert!(idle_rows > 0);
}

#[test]
fn generated_bodies_are_plausible() {
    let mut cfg = small_cfg(9);
    cfg.classes = 8;
    cfg.sequences = 8;
    let seqs = generate_synthetic(&cfg).unwrap();
    for s in &seqs {
        let bones = &s.topology.bones;
        for f in (0..s.num_frames()).step_by(7) {
            let fr = s.frame(f);
            for &(p, c) in bones {
                let d: f64 = (0..3).map(|i| (fr[p][i] - fr[c][i]).powi(2)).sum::<f64>().sqrt();
                assert!(d > 0.05 && d < 0.8, "bone {p}-{c} length {d}");
            }
            assert!(fr.iter().all(|p| p[1] > -0.3 && p[1] < 2.6));
        }
        let w = split_windows(s, 16, 16).unwrap();
        for win in &w.windows {
            assert!(torso_planes(win, &s.topology.torso).iter().all(|p| p.is_some()));
        }
    }
}

#[test]
fn skel_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = generate_synthetic(&small_cfg(2)).unwrap();
    let path = dir.path().join("a.skel");
    write_sequence(&path, &seqs[0]).unwrap();
    let back = read_sequence(&path).unwrap();
    assert_eq!(back, seqs[0]);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_sequence(&path).is_err());
    assert!(read_sequence(dir.path().join("none.skel")).is_err());
}

#[test]
fn manifest_round_trip_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = generate_synthetic(&small_cfg(2)).unwrap();
    let mut names = Vec::new();
    for s in &seqs[..3] {
        let name = format!("{}.skel", s.id);
        write_sequence(dir.path().join(&name), s).unwrap();
        names.push(name.into());
    }
    let m = DatasetManifest {
        classes: seqs[0].class_names.clone(),
        joints: 15,
        train: names[..2].to_vec(),
        val: vec![],
        test: names[2..].to_vec(),
    };
    let mp = dir.path().join("manifest.json");
    m.save(&mp).unwrap();
    let back = DatasetManifest::load(&mp).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.load_split(dir.path(), "train").unwrap().len(), 2);
    assert!(back.load_split(dir.path(), "bogus").is_err());
    let h1 = m.content_hash(dir.path()).unwrap();
    assert_eq!(h1, m.content_hash(dir.path()).unwrap());
    write_sequence(dir.path().join(&names[0]), &seqs[5]).unwrap();
    assert_ne!(h1, m.content_hash(dir.path()).unwrap());
}

fn seq_with(n: usize, k: usize, segs: Vec<GroundTruthSegment>) -> SkeletonSequence {
    let names = (0..k).map(|i| format!("c{i}")).collect();
    SkeletonSequence::new(
        "p",
        30.0,
        SkeletonTopology::standard(5).unwrap(),
        names,
        vec![[0.0; 3]; n * 5],
        segs,
    )
    .unwrap()
}

fn arb_case() -> impl Strategy<Value = (usize, usize, usize, Vec<(usize, usize, usize)>)> {
    (2usize..40, 1usize..200).prop_flat_map(|(f, n)| {
        (
            Just(f),
            1usize..=f,
            Just(n),
            prop::collection::vec((0usize..3, 0..n, 1usize..60), 0..6),
        )
    })
}

proptest! {
    #[test]
    fn windows_cover_every_frame((f, stride, n, raw) in arb_case()) {
        let segs = raw
            .into_iter()
            .map(|(c, s, l)| GroundTruthSegment { class: c, start: s, end: (s + l).min(n) })
            .filter(|g| g.start < g.end)
            .collect();
        let seq = seq_with(n, 3, segs);
        let b = split_windows(&seq, f, stride).unwrap();
        prop_assert_eq!(b.len(), window_count(n, f, stride));
        let mut covered = vec![false; n];
        for &s in &b.starts {
            for c in covered.iter_mut().skip(s).take(f) {
                *c = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
        for w in &b.windows {
            prop_assert_eq!(w.frames, f);
        }
    }

    #[test]
    fn target_marginals_match_overlap_oracle((f, stride, n, raw) in arb_case()) {
        let segs: Vec<_> = raw
            .into_iter()
            .map(|(c, s, l)| GroundTruthSegment { class: c, start: s, end: (s + l).min(n) })
            .filter(|g| g.start < g.end)
            .collect();
        let seq = seq_with(n, 3, segs.clone());
        let t = frame_targets(&seq, f, stride).unwrap();
        let rows = t.shape()[0];
        for k in 0..3 {
            let marginal: f64 = (0..rows).map(|w| t.data()[w * 3 + k]).sum();
            let mut count = 0;
            for w in 0..rows {
                let lo = w * stride;
                let hi = (lo + f).min(n);
                let hit = segs.iter().any(|g| {
                    g.class == k && (lo..hi).any(|fr| (g.start..g.end).contains(&fr))
                });
                count += hit as usize;
            }
            prop_assert_eq!(marginal as usize, count);
        }
    }
}
