use ftn::cfa::{count_params, Cfa, CfaConfig, PamCam};
use ftn::nn::{BatchNorm2d, Builder, Conv2d, Mode};
use ftn::tensor::BN_EPS;
use ftn::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Maps = Vec<Vec<Vec<f64>>>; // [batch][channel][pixel]

fn conv1x1(ps: &ParamStore<f64>, conv: &Conv2d, x: &Maps) -> Maps {
    let w = ps.param(conv.weight).value.data();
    let b = conv.bias.map(|id| ps.param(id).value.data().to_vec());
    let (c_in, pixels) = (x[0].len(), x[0][0].len());
    let c_out = w.len() / c_in;
    x.iter()
        .map(|xb| {
            (0..c_out)
                .map(|o| (0..pixels).map(|p| (0..c_in).map(|i| w[o * c_in + i] * xb[i][p]).sum::<f64>() + b.as_ref().map_or(0.0, |b| b[o])).collect())
                .collect()
        })
        .collect()
}

fn bn_train(ps: &ParamStore<f64>, bn: &BatchNorm2d, x: &Maps) -> Maps {
    let (gamma, beta) = (ps.param(bn.gamma).value.data(), ps.param(bn.beta).value.data());
    let mut out = x.clone();
    for c in 0..x[0].len() {
        let vals: Vec<f64> = x.iter().flat_map(|xb| xb[c].iter().copied()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for (ob, xb) in out.iter_mut().zip(x) {
            for (o, v) in ob[c].iter_mut().zip(&xb[c]) {
                *o = (v - mean) / (var + BN_EPS).sqrt() * gamma[c] + beta[c];
            }
        }
    }
    out
}

fn relu(x: Maps) -> Maps {
    x.into_iter().map(|b| b.into_iter().map(|c| c.into_iter().map(|v| v.max(0.0)).collect()).collect()).collect()
}

fn softmax_rows(m: &mut [Vec<f64>]) {
    for row in m {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - max).exp() / z);
    }
}

fn to_maps(t: &Tensor<f64>) -> Maps {
    let s = t.shape();
    let plane = s[2] * s[3];
    (0..s[0]).map(|b| (0..s[1]).map(|c| t.data()[(b * s[1] + c) * plane..(b * s[1] + c + 1) * plane].to_vec()).collect()).collect()
}

fn flat(m: &Maps) -> Vec<f64> {
    m.iter().flatten().flatten().copied().collect()
}

/// The whole module written out with loops over batch, channel and pixel.
fn oracle(ps: &ParamStore<f64>, cfa: &Cfa, input: &Tensor<f64>) -> (Maps, Maps, Maps) {
    let a = to_maps(input);
    let n = cfa.cfg.pool_factor;
    let d = cfa.cfg.squeezed();
    let pixels = a[0][0].len();
    let sq: Maps = a.iter().map(|ab| (0..d).map(|c| (0..pixels).map(|p| (0..n).map(|k| ab[c * n + k][p]).fold(f64::NEG_INFINITY, f64::max)).collect()).collect()).collect();
    let q = relu(bn_train(ps, &cfa.query_bn, &conv1x1(ps, &cfa.query, &sq)));
    let k = relu(bn_train(ps, &cfa.key_bn, &conv1x1(ps, &cfa.key, &sq)));
    let v = conv1x1(ps, &cfa.value, &sq);
    let (gamma, phi) = (ps.param(cfa.gamma).value.item(), ps.param(cfa.phi).value.item());

    let (mut ca_all, mut pa_all, mut fused_all) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..a.len() {
        let mut x: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (0..pixels).map(|p| q[b][i][p] * k[b][j][p]).sum()).collect()).collect();
        softmax_rows(&mut x);
        let mut s: Vec<Vec<f64>> = (0..pixels).map(|i| (0..pixels).map(|j| (0..d).map(|c| k[b][c][i] * q[b][c][j]).sum()).collect()).collect();
        softmax_rows(&mut s);
        let ca: Vec<Vec<f64>> = (0..d).map(|i| (0..pixels).map(|p| (0..d).map(|j| x[i][j] * v[b][j][p]).sum()).collect()).collect();
        let pa: Vec<Vec<f64>> = (0..d).map(|c| (0..pixels).map(|j| (0..pixels).map(|i| v[b][c][i] * s[j][i]).sum()).collect()).collect();
        let fused: Vec<Vec<f64>> = (0..d).map(|c| (0..pixels).map(|p| gamma * ca[c][p] + phi * pa[c][p] + sq[b][c][p]).collect()).collect();
        ca_all.push(ca);
        pa_all.push(pa);
        fused_all.push(fused);
    }
    let out = conv1x1(ps, &cfa.recover, &bn_train(ps, &cfa.recover_bn, &fused_all));
    (out, ca_all, pa_all)
}

#[test]
fn forward_matches_loop_oracle() {
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfa = Cfa::new(&mut Builder::new(&mut ps, &mut rng), CfaConfig::new(8).unwrap()).unwrap();
    // move every parameter off its initial value so each one matters
    for id in ps.ids().collect::<Vec<_>>() {
        let p = ps.param_mut(id);
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let input = Tensor::from_fn(&[2, 8, 2, 2], |_| rng.random_range(-1.0..1.0));
    let (out, ca, pa) = oracle(&ps, &cfa, &input);

    let mut g = Graph::new();
    let x = g.constant(input);
    let got = cfa.forward(&mut g, &mut ps, x, Mode::Train).unwrap();
    for (name, var, want) in [("attended", got.attended, flat(&out)), ("ca_map", got.ca_map, flat(&ca)), ("pa_map", got.pa_map, flat(&pa))] {
        let have = g.value(var).data();
        assert_eq!(have.len(), want.len(), "{name}");
        for (i, (h, w)) in have.iter().zip(&want).enumerate() {
            assert!((h - w).abs() <= 1e-10, "{name}[{i}]: {h} vs {w}");
        }
    }
    for (var, rows) in [(got.channel_affinity, 4 * 2), (got.position_affinity, 4 * 2)] {
        let v = g.value(var).data();
        let width = v.len() / rows;
        for r in v.chunks(width) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cheaper_than_pam_cam_at_every_width() {
    for c in [64, 256, 1024] {
        let cfa = count_params(&Cfa::descriptor(CfaConfig::new(c).unwrap()));
        let dual = count_params(&PamCam::descriptor(c));
        assert!(cfa < dual, "C={c}: {cfa} vs {dual}");
        assert!((cfa as f64) / (dual as f64) <= 0.2, "C={c}: ratio {}", cfa as f64 / dual as f64);
    }
}

#[test]
fn full_width_parameter_count() {
    let p = count_params(&Cfa::descriptor(CfaConfig::new(1024).unwrap()));
    assert!((1.1e6..=1.5e6).contains(&(p as f64)), "{p}");
}
