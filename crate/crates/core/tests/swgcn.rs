mod common;

use common::{max_grad_rel_err, rand_tensor};
use hydraview::dataset::{generate_synthetic, split_windows, SkeletonTopology, SynthConfig};
use hydraview::geometry::{make_virtual_cameras, render_views, ProjectedWindow, RigConfig};
use hydraview::swgcn::{
    batch_input, graph_conv, temporal_conv, window_input, SkeletonGraph, Swgcn, SwgcnConfig,
};
use hydraview::tensor::{cross_entropy_value, AdamW, AdamWConfig, Tape, Tensor};
use hydraview::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(d: usize) -> SwgcnConfig {
    SwgcnConfig {
        feature_dim: d,
        groups: 4,
        classes: 5,
        ..SwgcnConfig::default()
    }
}

fn sample_views(views: usize) -> (Vec<ProjectedWindow<f64>>, SkeletonTopology) {
    let seqs = generate_synthetic(&SynthConfig {
        seed: 1,
        sequences: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let batch = split_windows(&seqs[0], 16, 16).unwrap();
    let cams = make_virtual_cameras(&RigConfig::with_views(views)).unwrap();
    let torso = seqs[0].topology.torso;
    (
        render_views(&batch.windows[3], &cams, &torso, 0.0).unwrap(),
        seqs[0].topology.clone(),
    )
}

#[test]
fn normalized_adjacency() {
    let g = SkeletonGraph::<f64>::from_edges(3, &[]).unwrap();
    assert_eq!(g.adjacency().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let g = SkeletonGraph::<f64>::from_edges(2, &[(0, 1)]).unwrap();
    assert_eq!(g.adjacency().data(), &[0.5, 0.5, 0.5, 0.5]);

    let topo = SkeletonTopology::standard(15).unwrap();
    let g = SkeletonGraph::<f64>::from_topology(&topo).unwrap();
    let a = g.adjacency();
    let j = 15;
    let mut deg = vec![1.0; j];
    for &(p, c) in &topo.bones {
        deg[p] += 1.0;
        deg[c] += 1.0;
    }
    for r in 0..j {
        for c in 0..j {
            assert_eq!(a.at(&[r, c]), a.at(&[c, r]));
            let linked = r == c || topo.bones.iter().any(|&(p, q)| (p, q) == (r, c) || (q, p) == (r, c));
            let want = if linked { 1.0 / (deg[r] * deg[c] as f64).sqrt() } else { 0.0 };
            assert!((a.at(&[r, c]) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn graph_conv_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap()).unwrap();
    let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let id = SkeletonGraph::<f64>::from_edges(2, &[]).unwrap();
    let y = graph_conv(x, id.adjacency(), eye, None).unwrap();
    assert_eq!(y.value().data(), x.value().data());
    let path = SkeletonGraph::<f64>::from_edges(2, &[(0, 1)]).unwrap();
    let y = graph_conv(x, path.adjacency(), eye, None).unwrap();
    // [[.5,.5],[.5,.5]] · [[1,2],[0,0]]
    assert_eq!(y.value().data(), &[0.5, 1.0, 0.5, 1.0]);
}

#[test]
fn graph_conv_joint_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let topo = SkeletonTopology::standard(7).unwrap();
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let edges: Vec<_> = topo.bones.clone();
    // joint j of the permuted skeleton is joint perm[j] of the original
    let mut inv = [0usize; 7];
    for (n, &o) in perm.iter().enumerate() {
        inv[o] = n;
    }
    let pedges: Vec<_> = edges.iter().map(|&(p, c)| (inv[p], inv[c])).collect();
    let g = SkeletonGraph::<f64>::from_edges(7, &edges).unwrap();
    let pg = SkeletonGraph::<f64>::from_edges(7, &pedges).unwrap();
    let x = rand_tensor(&mut rng, &[2, 7, 3], 1.0);
    let w = rand_tensor(&mut rng, &[3, 4], 1.0);
    let tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let wv = tape.constant(w).unwrap();
    let y = graph_conv(xv, g.adjacency(), wv, None).unwrap().value();
    let px = xv.select(1, &perm).unwrap();
    let py = graph_conv(px, pg.adjacency(), wv, None).unwrap().value();
    for f in 0..2 {
        for (n, &o) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((py.at(&[f, n, c]) - y.at(&[f, o, c])).abs() < 1e-14);
            }
        }
    }
}

fn tconv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, k: usize) -> Vec<f64> {
    let s = x.shape();
    let (b, f, j, c) = (s[0], s[1], s[2], s[3]);
    let co = w.shape()[1];
    let pad = (k - 1) as isize / 2;
    let mut out = vec![0.0; b * f * j * co];
    for bi in 0..b {
        for t in 0..f {
            for ji in 0..j {
                for o in 0..co {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        let src = (t as isize + kk as isize - pad).clamp(0, f as isize - 1) as usize;
                        for ci in 0..c {
                            acc += x.at(&[bi, src, ji, ci]) * w.at(&[kk * c + ci, o]);
                        }
                    }
                    out[((bi * f + t) * j + ji) * co + o] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn temporal_conv_examples() {
    let tape = Tape::new();
    // averaging kernel on a constant keeps the constant everywhere
    let x = tape.constant(Tensor::full(vec![1, 8, 2, 1], 2.5)).unwrap();
    let w = tape.constant(Tensor::full(vec![5, 1], 0.2)).unwrap();
    let y = temporal_conv(x, w, None, 5).unwrap();
    assert_eq!(y.shape(), vec![1, 8, 2, 1]);
    assert!(y.value().data().iter().all(|v: &f64| (*v - 2.5).abs() < 1e-15));

    // impulse with k=3 against a sliding sum
    let mut impulse = vec![0.0; 8];
    impulse[3] = 1.0;
    let xt = Tensor::new(vec![1, 8, 1, 1], impulse).unwrap();
    let wt = Tensor::new(vec![3, 1], vec![1.0, 10.0, 100.0]).unwrap();
    let y = temporal_conv(tape.constant(xt.clone()).unwrap(), tape.constant(wt.clone()).unwrap(), None, 3)
        .unwrap();
    assert_eq!(y.value().data(), tconv_oracle(&xt, &wt, 3).as_slice());
    assert_eq!(y.value().data(), &[0.0, 0.0, 100.0, 10.0, 1.0, 0.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (f, k) in [(16, 5), (16, 1), (5, 5), (7, 3)] {
        let xr = rand_tensor(&mut rng, &[2, f, 3, 4], 1.0);
        let wr = rand_tensor(&mut rng, &[k * 4, 6], 1.0);
        let y = temporal_conv(tape.constant(xr.clone()).unwrap(), tape.constant(wr.clone()).unwrap(), None, k)
            .unwrap();
        assert_eq!(y.shape()[1], f);
        let o = tconv_oracle(&xr, &wr, k);
        for (a, b) in y.value().data().iter().zip(&o) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let xs = tape.constant(Tensor::zeros(vec![1, 4, 1, 1])).unwrap();
    assert!(temporal_conv(xs, tape.constant(Tensor::zeros(vec![5, 1])).unwrap(), None, 5).is_err());
    assert!(temporal_conv(xs, tape.constant(Tensor::zeros(vec![2, 1])).unwrap(), None, 2).is_err());
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = SkeletonGraph::<f64>::from_topology(&SkeletonTopology::standard(5).unwrap()).unwrap();
    let adj = g.adjacency().clone();
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 6, 5, 3], 1.0),
        rand_tensor(&mut rng, &[3, 4], 1.0),
        rand_tensor(&mut rng, &[4], 1.0),
        rand_tensor(&mut rng, &[12, 2], 1.0),
        rand_tensor(&mut rng, &[2], 1.0),
    ];
    let err = max_grad_rel_err(&inputs, 1e-5, 1e-7, |_t, v| {
        let h = graph_conv(v[0], &adj, v[1], Some(v[2]))?;
        temporal_conv(h, v[3], Some(v[4]), 3)?.square()?.sum_all()
    });
    assert!(err < 1e-6, "{err}");
}

/// Loop-level reimplementation of the encoder trunk on one window.
fn oracle_features(model: &Swgcn<f64>, input: &[f64], topo: &SkeletonTopology) -> Vec<f64> {
    let cfg = model.config();
    let (f, j, d, k) = (cfg.frames, topo.num_joints(), cfg.feature_dim, cfg.temporal_kernel);
    let mut deg = vec![1.0f64; j];
    let mut link = vec![false; j * j];
    for i in 0..j {
        link[i * j + i] = true;
    }
    for &(p, c) in &topo.bones {
        deg[p] += 1.0;
        deg[c] += 1.0;
        link[p * j + c] = true;
        link[c * j + p] = true;
    }
    let p = |name: String| {
        let i = model.params().names().iter().position(|n| *n == name).unwrap();
        model.params().values()[i].clone()
    };
    let mut x: Vec<f64> = input.to_vec();
    let mut cin = 3;
    for blk in 0..cfg.blocks {
        let (gw, gb) = (p(format!("block{blk}.graph.weight")), p(format!("block{blk}.graph.bias")));
        let (ga, be) = (p(format!("block{blk}.norm.gamma")), p(format!("block{blk}.norm.beta")));
        let (tw, tb) = (p(format!("block{blk}.temporal.weight")), p(format!("block{blk}.temporal.bias")));
        let mut z = vec![0.0; f * j * d];
        for t in 0..f {
            for a in 0..j {
                for o in 0..d {
                    let mut acc = gb.data()[o];
                    for bj in 0..j {
                        if !link[a * j + bj] {
                            continue;
                        }
                        let w = 1.0 / (deg[a] * deg[bj]).sqrt();
                        for c in 0..cin {
                            acc += w * x[(t * j + bj) * cin + c] * gw.at(&[c, o]);
                        }
                    }
                    z[(t * j + a) * d + o] = acc;
                }
            }
        }
        let per = d / cfg.groups;
        for g in 0..cfg.groups {
            let chans = g * per..(g + 1) * per;
            let vals: Vec<f64> = (0..f * j)
                .flat_map(|pos| chans.clone().map(move |c| (pos, c)))
                .map(|(pos, c)| z[pos * d + c])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for pos in 0..f * j {
                for c in chans.clone() {
                    let v = (z[pos * d + c] - mean) / (var + cfg.norm_eps).sqrt();
                    z[pos * d + c] = (v * ga.data()[c] + be.data()[c]).max(0.0);
                }
            }
        }
        let pad = (k - 1) / 2;
        let mut y = vec![0.0; f * j * d];
        for t in 0..f {
            for a in 0..j {
                for o in 0..d {
                    let mut acc = tb.data()[o];
                    for kk in 0..k {
                        let src = (t + kk).saturating_sub(pad).min(f - 1);
                        for c in 0..d {
                            acc += z[(src * j + a) * d + c] * tw.at(&[kk * d + c, o]);
                        }
                    }
                    y[(t * j + a) * d + o] = acc;
                }
            }
        }
        x = y;
        cin = d;
    }
    (0..d)
        .map(|o| (0..f * j).map(|pos| x[pos * d + o]).sum::<f64>() / (f * j) as f64)
        .collect()
}

#[test]
fn encoder_matches_loop_oracle() {
    let (views, topo) = sample_views(3);
    let model = Swgcn::<f64>::new(small_config(8), topo.clone(), 5).unwrap();
    for pw in &views {
        let got = model.encode_window(pw).unwrap();
        let want = oracle_features(&model, &window_input(pw), &topo);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
    // all-zero window: the forward pass is driven by biases alone
    let zero = ProjectedWindow {
        frames: 16,
        joints: 15,
        coords: vec![[0.0; 2]; 240],
        visible: vec![false; 240],
        view: 0,
    };
    let got = model.encode_window(&zero).unwrap();
    let want = oracle_features(&model, &vec![0.0; 240 * 3], &topo);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
    assert_eq!(got, model.encode_window(&zero).unwrap());
}

#[test]
fn default_feature_length() {
    let (views, topo) = sample_views(1);
    let model = Swgcn::<f64>::new(SwgcnConfig::default(), topo, 0).unwrap();
    assert_eq!(model.encode_window(&views[0]).unwrap().len(), 384);
}

#[test]
fn zero_head_gives_uniform_logits() {
    let (_, topo) = sample_views(1);
    let mut model = Swgcn::<f64>::new(small_config(8), topo, 0).unwrap();
    let n = model.params().len();
    for id in [n - 2, n - 1] {
        let shape = model.params().values()[id].shape().to_vec();
        model
            .params_mut()
            .set(hydraview::tensor::ParamId(id), Tensor::zeros(shape))
            .unwrap();
    }
    let logits = model.classify_window(&[0.0; 8]).unwrap();
    assert_eq!(logits.len(), 5);
    let ce = cross_entropy_value(&logits, 2).unwrap();
    assert!((ce - 5f64.ln()).abs() < 1e-15);
    assert!(model.classify_window(&[0.0; 7]).is_err());
}

#[test]
fn freeze_contract_and_grid_shape() {
    let seqs = generate_synthetic(&SynthConfig {
        seed: 3,
        sequences: 2,
        classes: 2,
        frames: 160,
        ..SynthConfig::default()
    })
    .unwrap();
    let wins = split_windows(&seqs[0], 16, 16).unwrap();
    assert_eq!(wins.len(), 10);
    let cams = make_virtual_cameras(&RigConfig::default()).unwrap();
    let mut model = Swgcn::<f64>::new(small_config(8), seqs[0].topology.clone(), 1).unwrap();
    assert!(matches!(
        model.extract_feature_grid(&wins.windows, &cams, 0.0),
        Err(Error::NotFrozen(_))
    ));
    model.freeze();
    let grid = model.extract_feature_grid(&wins.windows, &cams, 0.0).unwrap();
    assert_eq!((grid.views(), grid.windows(), grid.channels()), (12, 10, 8));
    assert!(grid.valid().iter().all(|&v| v));
    let one = model.extract_feature_grid(&wins.windows, &cams[..1], 0.0).unwrap();
    assert_eq!((one.views(), one.windows()), (1, 10));
    assert_eq!(one.cell(0, 4), grid.cell(0, 4));

    let mut opt = AdamW::new(AdamWConfig::default(), model.params());
    let grads: Vec<_> = model.params().values().iter().map(|v| Tensor::zeros(v.shape())).collect();
    let before = model.params().content_hash();
    assert!(matches!(opt.step(model.params_mut(), &grads), Err(Error::Frozen(_))));
    assert_eq!(before, model.params().content_hash());
}

#[test]
fn checkpoint_round_trip() {
    let (views, topo) = sample_views(2);
    let model = Swgcn::<f64>::new(small_config(8), topo, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    hydraview::tensor::write_checkpoint(&path, &model.to_checkpoint(3).unwrap()).unwrap();
    let back = Swgcn::<f64>::from_checkpoint(&hydraview::tensor::read_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.params().content_hash(), model.params().content_hash());
    assert_eq!(back.config(), model.config());
    assert_eq!(back.encode_window(&views[1]).unwrap(), model.encode_window(&views[1]).unwrap());
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let (views, topo) = sample_views(2);
    let cfg = SwgcnConfig {
        feature_dim: 4,
        groups: 2,
        blocks: 2,
        temporal_kernel: 3,
        classes: 3,
        ..SwgcnConfig::default()
    };
    let model = Swgcn::<f64>::new(cfg, topo, 0).unwrap();
    let refs: Vec<_> = views.iter().collect();
    let input = batch_input(&refs).unwrap();
    let mut inputs = model.params().values().to_vec();
    inputs.push(input);
    // input-entry gradients reach 1e-7, where central differences carry ~1e-11 noise
    let bad = common::grad_mismatches(&inputs, 1e-5, 1e-5, 1e-5, |_t, v| {
        let n = v.len() - 1;
        let (_, logits) = model.forward(&v[..n], v[n])?;
        logits.cross_entropy(&[0, 2])
    });
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn f32_encoder_runs() {
    let (views, topo) = sample_views(1);
    let model = Swgcn::<f32>::new(small_config(8), topo, 0).unwrap();
    let pw = ProjectedWindow::<f32> {
        frames: views[0].frames,
        joints: views[0].joints,
        coords: views[0].coords.iter().map(|c| [c[0] as f32, c[1] as f32]).collect(),
        visible: views[0].visible.clone(),
        view: 0,
    };
    let feat = model.encode_window(&pw).unwrap();
    assert_eq!(feat.len(), 8);
    assert!(feat.iter().all(|v| v.is_finite()));
}
