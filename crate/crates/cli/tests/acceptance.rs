//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1, 2 and 6-8 exercise the library against brute-force oracles.
//! Criteria 3, 4, 5 and 9 drive the `ynet` binary end to end on the default
//! phantom dataset. The process exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ynet_core::baselines::{
    frangi_vesselness, hessian_eigenvalues, local_mean_std, renyi_single, FrangiParams, Histogram256, HIST_BINS,
};
use ynet_core::metrics::{Counts, EvalReport};
use ynet_core::model::{PositionSite, YNetConfig, YNetModel};
use ynet_core::phantom::{generate_phantom, PhantomSpec, TubeSpec};
use ynet_core::predict::{
    assemble, binarize, calibrate_threshold, coverage_map, predict_volume, CalibrationObjective, PatchModel,
};
use ynet_core::volume::{read_volume, Volume3D, VolumeKind};
use ynet_oracles as oracle;
use ynet_tensor::rng::SeedRng;
use ynet_tensor::{
    activation, activation_backward, bce_loss, bce_loss_backward, concat_channels, conv3d, conv3d_backward,
    conv3d_strided, conv3d_strided_backward, conv_transpose3d, conv_transpose3d_backward, maxpool3d,
    maxpool3d_backward, split_channels, upsample3, upsample3_backward, Activation, ConvParams, Shape5, Tensor5,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(shape: Shape5, rng: &mut SeedRng) -> Tensor5<f64> {
    let data = (0..shape.len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Tensor5::from_vec(shape, data).unwrap()
}

fn random_params(c_in: usize, c_out: usize, rng: &mut SeedRng) -> ConvParams<f64> {
    let mut p = ConvParams::zeros(c_in, c_out);
    p.weight.iter_mut().for_each(|w| *w = rng.uniform_range(-1.0, 1.0));
    p.bias.iter_mut().for_each(|b| *b = rng.uniform_range(-1.0, 1.0));
    p
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor(shape: Shape5, v: &[f64]) -> Tensor5<f64> {
    Tensor5::from_vec(shape, v.to_vec()).unwrap()
}

/// Worst relative error of the input and parameter gradients of
/// `sum(g * op(x, p))`.
fn conv_gradient_error(
    x: &Tensor5<f64>,
    p: &ConvParams<f64>,
    fwd: impl Fn(&Tensor5<f64>, &ConvParams<f64>) -> Tensor5<f64>,
    bwd: impl Fn(&Tensor5<f64>, &ConvParams<f64>, &Tensor5<f64>) -> (Tensor5<f64>, ConvParams<f64>),
    rng: &mut SeedRng,
) -> f64 {
    let g = random_tensor(fwd(x, p).shape(), rng);
    let (gx, gp) = bwd(x, p, &g);
    let num_x = oracle::numeric_gradient(x.data(), 1e-3, |v| dot(fwd(&tensor(x.shape(), v), p).data(), g.data()));
    let num_w = oracle::numeric_gradient(&p.weight, 1e-3, |v| {
        let mut q = p.clone();
        q.weight.copy_from_slice(v);
        dot(fwd(x, &q).data(), g.data())
    });
    let num_b = oracle::numeric_gradient(&p.bias, 1e-3, |v| {
        let mut q = p.clone();
        q.bias.copy_from_slice(v);
        dot(fwd(x, &q).data(), g.data())
    });
    [
        oracle::max_relative_error(gx.data(), &num_x, 1e-6),
        oracle::max_relative_error(&gp.weight, &num_w, 1e-6),
        oracle::max_relative_error(&gp.bias, &num_b, 1e-6),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Worst relative error of the input gradient of `sum(g * op(x))`.
fn unary_gradient_error(
    x: &Tensor5<f64>,
    fwd: impl Fn(&Tensor5<f64>) -> Tensor5<f64>,
    bwd: impl Fn(&Tensor5<f64>, &Tensor5<f64>) -> Tensor5<f64>,
    rng: &mut SeedRng,
) -> f64 {
    let g = random_tensor(fwd(x).shape(), rng);
    let analytic = bwd(x, &g);
    let num = oracle::numeric_gradient(x.data(), 1e-3, |v| dot(fwd(&tensor(x.shape(), v)).data(), g.data()));
    oracle::max_relative_error(analytic.data(), &num, 1e-6)
}

fn whole_model_gradient_error(site: PositionSite, seed: u64) -> f64 {
    let cfg = YNetConfig {
        n_levels: 1,
        base_kernels: 2,
        patch_size: 8,
        position_site: site,
        ..YNetConfig::default()
    };
    let mut m = YNetModel::<f64>::build(&cfg, seed).unwrap();
    let mut rng = SeedRng::new(seed + 100);
    // Random biases keep ReLU pre-activations off the kink; the small step
    // keeps probes from crossing a kink or a pooling argmax switch.
    for p in m.params_mut() {
        p.bias.iter_mut().for_each(|b| *b = rng.uniform_range(-0.1, 0.1));
    }
    let shape = Shape5::new(2, 1, 8, 8, 8);
    let x = random_tensor(shape, &mut rng).map(|v| 0.5 + 0.5 * v);
    let centers = [[0.3, 0.4, 0.5], [0.6, 0.2, 0.8]];
    let (_, cache) = m.forward_train(&x, &centers).unwrap();
    let g = random_tensor(shape, &mut rng);
    let grads = m.backward(&cache, &g).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|p| p.weight.iter().chain(&p.bias).copied()).collect();
    let flat: Vec<f64> = m.params().iter().flat_map(|p| p.weight.iter().chain(&p.bias).copied()).collect();
    let sizes = m.param_sizes();
    let numeric = oracle::numeric_gradient(&flat, 1e-5, |v| {
        let mut probe = m.clone();
        let mut off = 0;
        for (slot, n) in probe.param_slices_mut().into_iter().zip(&sizes) {
            slot.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        dot(probe.forward(&x, &centers).unwrap().data(), g.data())
    });
    oracle::max_relative_error(&analytic, &numeric, 1e-6)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = SeedRng::new(1);
    let mut ops = BTreeMap::new();
    let x = random_tensor(Shape5::new(1, 2, 4, 4, 4), &mut rng);
    let p = random_params(2, 3, &mut rng);
    ops.insert(
        "conv3d",
        conv_gradient_error(&x, &p, |x, p| conv3d(x, p).unwrap(), |x, p, g| conv3d_backward(x, p, g).unwrap(), &mut rng),
    );
    ops.insert(
        "conv3d_strided",
        conv_gradient_error(
            &x,
            &p,
            |x, p| conv3d_strided(x, p, 2).unwrap(),
            |x, p, g| conv3d_strided_backward(x, p, 2, g).unwrap(),
            &mut rng,
        ),
    );
    let small = random_tensor(Shape5::new(1, 2, 2, 3, 2), &mut rng);
    ops.insert(
        "conv_transpose3d",
        conv_gradient_error(
            &small,
            &p,
            |x, p| conv_transpose3d(x, p).unwrap(),
            |x, p, g| conv_transpose3d_backward(x, p, g).unwrap(),
            &mut rng,
        ),
    );
    ops.insert(
        "maxpool3d",
        unary_gradient_error(
            &x,
            |x| maxpool3d(x).unwrap().0,
            |x, g| maxpool3d_backward(&maxpool3d(x).unwrap().1, g).unwrap(),
            &mut rng,
        ),
    );
    ops.insert(
        "upsample3",
        unary_gradient_error(&small, upsample3, |_, g| upsample3_backward(g).unwrap(), &mut rng),
    );
    let b = random_tensor(Shape5::new(1, 1, 4, 4, 4), &mut rng);
    ops.insert(
        "concat_channels",
        unary_gradient_error(
            &x,
            |x| concat_channels(x, &b).unwrap(),
            |_, g| split_channels(g, 2).unwrap().0,
            &mut rng,
        ),
    );
    let away = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        ops.insert(
            name,
            unary_gradient_error(
                &away,
                |x| activation(x, kind),
                |x, g| activation_backward(&activation(x, kind), g, kind).unwrap(),
                &mut rng,
            ),
        );
    }
    let probs = random_tensor(Shape5::new(1, 1, 2, 2, 2), &mut rng).map(|v| 0.5 + 0.4 * v);
    let target = tensor(probs.shape(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let num = oracle::numeric_gradient(probs.data(), 1e-3, |v| bce_loss(&tensor(probs.shape(), v), &target).unwrap());
    ops.insert(
        "bce_loss",
        oracle::max_relative_error(bce_loss_backward(&probs, &target).unwrap().data(), &num, 1e-6),
    );
    let worst_op = ops.iter().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, v)| (*k, *v)).unwrap();
    for (name, err) in &ops {
        ensure(*err < 1e-4, || format!("{name} gradient error {err:.2e} >= 1e-4"))?;
    }
    let mut worst_model: f64 = 0.0;
    for (k, site) in [
        PositionSite::EncoderFirst,
        PositionSite::EncoderLast,
        PositionSite::DecoderLast,
        PositionSite::None,
    ]
    .into_iter()
    .enumerate()
    {
        let err = whole_model_gradient_error(site, 11 + k as u64);
        ensure(err < 1e-3, || format!("whole model ({site:?}) gradient error {err:.2e} >= 1e-3"))?;
        worst_model = worst_model.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} ops, worst {} {:.1e}; reduced Y-net worst {:.1e}; {secs:.1}s",
        ops.len(),
        worst_op.0,
        worst_op.1,
        worst_model
    ))
}

/// Tile origins along one axis: multiples of half the patch, plus the last
/// position flush with the edge.
fn half_overlap_origins(dim: usize, patch: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|k| k * patch / 2).take_while(|&o| o + patch <= dim).collect();
    if *v.last().unwrap() != dim - patch {
        v.push(dim - patch);
    }
    v
}

fn criterion_2() -> Outcome {
    let mut rng = SeedRng::new(2);
    let instances = 100;
    for case in 0..instances {
        let (n, c_in, c_out) = (1 + rng.below(2) as usize, 1 + rng.below(3) as usize, 1 + rng.below(3) as usize);
        let dims = [0; 3].map(|_| 1 + rng.below(5) as usize);
        let x = random_tensor(Shape5::new(n, c_in, dims[0], dims[1], dims[2]), &mut rng);
        let p = random_params(c_in, c_out, &mut rng);
        let stride = 1 + (case % 2);
        let y = if stride == 1 {
            conv3d(&x, &p).unwrap()
        } else {
            conv3d_strided(&x, &p, 2).unwrap()
        };
        let (want, _) = oracle::conv3d(x.data(), n, c_in, dims, &p.weight, &p.bias, c_out, stride);
        let err = oracle::max_relative_error(y.data(), &want, 1e-6);
        ensure(err < 1e-6, || format!("conv3d case {case}: {err:.2e}"))?;
    }
    for case in 0..instances {
        let planes = 1 + rng.below(4) as usize;
        let dims = [0; 3].map(|_| 2 * (1 + rng.below(3) as usize));
        let x = random_tensor(Shape5::new(1, planes, dims[0], dims[1], dims[2]), &mut rng);
        let (y, _) = maxpool3d(&x).unwrap();
        ensure(y.data() == oracle::maxpool(x.data(), planes, dims).as_slice(), || {
            format!("maxpool3d case {case}")
        })?;
    }
    for case in 0..instances {
        let dims = [0; 3].map(|_| 1 + rng.below(8) as usize);
        let len = dims.iter().product();
        let data: Vec<f32> = (0..len).map(|_| rng.uniform() as f32).collect();
        let radius = 1 + rng.below(3) as usize;
        let vol = Volume3D::new(dims, [1.0; 3], VolumeKind::Intensity, data.clone()).unwrap();
        let (m, s) = local_mean_std(&vol, radius);
        let v: Vec<f64> = data.iter().map(|&x| f64::from(x)).collect();
        let (om, os) = oracle::window_mean_std(&v, dims, radius);
        let err = oracle::max_relative_error(&m, &om, 1e-6).max(oracle::max_relative_error(&s, &os, 1e-6));
        ensure(err < 1e-6, || format!("local mean/std case {case}: {err:.2e}"))?;
    }
    for case in 0..instances {
        let values: Vec<f32> = (0..200 + rng.below(300)).map(|_| (rng.uniform() * rng.uniform()) as f32).collect();
        let mut direct = [0u64; HIST_BINS];
        for &v in &values {
            direct[((f64::from(v) * 256.0).floor() as usize).min(255)] += 1;
        }
        let h = Histogram256::from_values(&values);
        ensure(h.counts == direct, || format!("histogram case {case}"))?;
        for alpha in [0.5, 1.0, 2.0] {
            let set = oracle::renyi_argmax_set(&direct, alpha, 1e-10);
            let run = set.windows(2).take_while(|w| w[1] == w[0] + 1).count();
            let want = (set[0] + set[run]) / 2;
            let got = renyi_single(&h, alpha).map_err(|e| e.to_string())?;
            ensure(got == want, || format!("renyi case {case} alpha {alpha}: {got} vs {want}"))?;
        }
    }
    for case in 0..instances {
        let patch = [8, 16][case % 2];
        let dims = [0; 3].map(|_| patch + rng.below(33) as usize);
        let axes = [0, 1, 2].map(|k| half_overlap_origins(dims[k], patch));
        let mut origins = Vec::new();
        for &z in &axes[2] {
            for &y in &axes[1] {
                for &x in &axes[0] {
                    origins.push([x, y, z]);
                }
            }
        }
        let got = coverage_map(dims, patch).map_err(|e| e.to_string())?;
        ensure(got == oracle::coverage(dims, &origins, patch), || format!("coverage case {case} {dims:?}"))?;
    }
    for case in 0..instances {
        let len = 1 + rng.below(500) as usize;
        let rate = rng.uniform();
        let pred: Vec<bool> = (0..len).map(|_| rng.uniform() < rate).collect();
        let truth: Vec<bool> = (0..len).map(|_| rng.uniform() < 0.3).collect();
        let c = Counts::tally(&pred, &truth);
        let (tp, fp, fn_, tn) = oracle::tally(&pred, &truth);
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), || format!("tally case {case}"))?;
        let r = EvalReport::from_counts(c);
        let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        if tp + fp > 0.0 && tp + fn_ > 0.0 && tn + fp > 0.0 {
            let want = [
                (tp + tn) / len as f64,
                tp / (tp + fn_),
                tn / (tn + fp),
                tp / (tp + fp),
                2.0 * tp / (2.0 * tp + fp + fn_),
            ];
            let got = [r.accuracy, r.sensitivity, r.specificity, r.precision, r.dsc];
            let err = oracle::max_relative_error(&got, &want, 1e-12);
            ensure(err < 1e-6, || format!("metrics case {case}: {err:.2e}"))?;
        }
    }
    Ok(format!(
        "{instances} instances each of conv3d, maxpool3d, local mean/std, histogram + Renyi cuts, coverage, metrics"
    ))
}

struct ConstantModel(f32);

impl PatchModel for ConstantModel {
    fn patch_size(&self) -> usize {
        16
    }

    fn predict_batch(&self, batch: &Tensor5<f32>, _centers: &[[f64; 3]]) -> ynet_core::Result<Tensor5<f32>> {
        Ok(Tensor5::filled(batch.shape(), self.0))
    }
}

/// Output depends on voxel values, position within the patch and the patch
/// centre, so overlapping tiles disagree.
struct MixingModel;

impl PatchModel for MixingModel {
    fn patch_size(&self) -> usize {
        16
    }

    fn predict_batch(&self, batch: &Tensor5<f32>, centers: &[[f64; 3]]) -> ynet_core::Result<Tensor5<f32>> {
        let per = 16 * 16 * 16;
        let mut out = batch.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = centers[i / per];
            let k = (i % per) as f32 / per as f32;
            *v = (0.4 * *v + 0.3 * c[1] as f32 + 0.3 * k).clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

fn random_volume(dims: [usize; 3], rng: &mut SeedRng) -> Volume3D {
    let len = dims.iter().product();
    Volume3D::new(dims, [1.0; 3], VolumeKind::Intensity, (0..len).map(|_| rng.uniform() as f32).collect()).unwrap()
}

fn criterion_6() -> Outcome {
    let mut rng = SeedRng::new(6);
    let mut dims_list = vec![[16, 16, 16], [48, 48, 48], [17, 31, 45], [47, 19, 23]];
    for _ in 0..6 {
        dims_list.push([0; 3].map(|_| 16 + rng.below(33) as usize));
    }
    let mut worst: f64 = 0.0;
    for dims in &dims_list {
        let vol = random_volume(*dims, &mut rng);
        let p = predict_volume(&ConstantModel(0.37), &vol).map_err(|e| e.to_string())?;
        let dev = p.data().iter().map(|&v| (v - 0.37).abs()).fold(0.0f32, f32::max);
        ensure(p.kind() == VolumeKind::Probability && dev < 1e-6, || {
            format!("constant model on {dims:?} deviates by {dev}")
        })?;
        let a = assemble(&MixingModel, &vol).map_err(|e| e.to_string())?;
        let p = predict_volume(&MixingModel, &vol).map_err(|e| e.to_string())?;
        let weighted: f64 = p.data().iter().zip(&a.coverage).map(|(&v, &c)| f64::from(v) * f64::from(c)).sum();
        let rel = ((weighted - a.tile_total) / a.tile_total).abs();
        ensure(rel < 1e-5, || format!("conservation on {dims:?}: relative error {rel:.2e}"))?;
        worst = worst.max(rel);
    }
    Ok(format!(
        "{} volumes from 16^3 to 48^3; worst conservation error {worst:.1e}",
        dims_list.len()
    ))
}

fn criterion_7() -> Outcome {
    let mut rng = SeedRng::new(7);
    for set in 0..20 {
        let mut vols = Vec::new();
        for _ in 0..1 + rng.below(3) {
            let dims = [0; 3].map(|_| 4 + rng.below(6) as usize);
            let len: usize = dims.iter().product();
            let mask: Vec<bool> = (0..len).map(|_| rng.uniform() < 0.25).collect();
            let probs: Vec<f32> = mask
                .iter()
                .map(|&m| {
                    let base = if m { 0.65 } else { 0.3 };
                    ((base + 0.3 * rng.normal()).clamp(0.0, 1.0) * 40.0).round() as f32 / 40.0
                })
                .collect();
            vols.push((dims, probs, mask));
        }
        let volumes: Vec<(Volume3D, Volume3D)> = vols
            .iter()
            .map(|(d, p, m)| {
                (
                    Volume3D::new(*d, [1.0; 3], VolumeKind::Probability, p.clone()).unwrap(),
                    Volume3D::from_mask(*d, [1.0; 3], m).unwrap(),
                )
            })
            .collect();
        let pairs: Vec<(&Volume3D, &Volume3D)> = volumes.iter().map(|(p, l)| (p, l)).collect();
        let got = calibrate_threshold(&pairs, CalibrationObjective::Accuracy).map_err(|e| e.to_string())?;
        let oracle_input: Vec<(Vec<f64>, Vec<bool>)> = vols
            .iter()
            .map(|(_, p, m)| (p.iter().map(|&v| f64::from(v)).collect(), m.clone()))
            .collect();
        let want = oracle::best_grid_threshold(&oracle_input);
        ensure(got == want, || format!("set {set}: calibrated {got}, oracle {want}"))?;

        let (prob, _) = &volumes[0];
        let counts: Vec<usize> = (0..=100)
            .map(|i| binarize(prob, i as f64 / 100.0).unwrap().count_nonzero())
            .collect();
        ensure(counts.windows(2).all(|w| w[0] >= w[1]), || format!("set {set}: sweep not monotone"))?;
    }
    Ok("20 calibration sets equal the exhaustive cut; 101-point sweeps monotone".into())
}

fn criterion_8() -> Outcome {
    let constant = Volume3D::filled([20, 18, 16], VolumeKind::Intensity, 0.4).unwrap();
    let f = frangi_vesselness(&constant, &FrangiParams::default()).map_err(|e| e.to_string())?;
    ensure(f.data().iter().all(|&v| v == 0.0), || "constant volume has non-zero vesselness".into())?;

    let spec = PhantomSpec {
        dims: [40, 40, 40],
        tubes: vec![TubeSpec {
            control_points: vec![[2.0, 20.0, 20.0], [37.0, 20.0, 20.0]],
            radius_start: 2.0,
            radius_end: 2.0,
            intensity: 0.6,
        }],
        background_level: 0.1,
        noise_sigma: 0.0,
        psf_sigma: 0.0,
        seed: 8,
    };
    let (img, lbl) = generate_phantom(&spec).map_err(|e| e.to_string())?;
    let f = frangi_vesselness(&img, &FrangiParams::default()).map_err(|e| e.to_string())?;
    let centre: Vec<f32> = (5..35).map(|x| f.get(x, 20, 20)).collect();
    let centre_mean = centre.iter().sum::<f32>() / centre.len() as f32;
    let bg: Vec<f32> = f.data().iter().zip(lbl.data()).filter(|(_, &l)| l == 0.0).map(|(&v, _)| v).collect();
    let bg_mean = bg.iter().sum::<f32>() / bg.len() as f32;
    ensure(centre_mean > 5.0 * bg_mean, || format!("centreline {centre_mean} vs background {bg_mean}"))?;

    let mut checked = 0;
    for sigma in [1.0, 2.0, 3.0] {
        let single = FrangiParams {
            scales: vec![sigma],
            ..FrangiParams::default()
        };
        let f = frangi_vesselness(&img, &single).map_err(|e| e.to_string())?;
        let [_, l2, l3] = hessian_eigenvalues(&img, sigma).map_err(|e| e.to_string())?;
        for i in 0..img.len() {
            if l2[i] > 0.0 || l3[i] > 0.0 {
                ensure(f.data()[i] == 0.0, || format!("sigma {sigma}: voxel {i} responds with positive eigenvalue"))?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "constant -> 0; centreline {centre_mean:.3} vs background {bg_mean:.4}; {checked} positive-eigenvalue voxels all 0"
    ))
}

/// Epoch-limited desk configuration: the full desk schedule (stride 8,
/// 240-epoch cap) does not fit the runtime budget on a single core.
const DESK_CONFIG: &str = r#"{
  "model": { "base_kernels": 4 },
  "sampling": { "stride_pos": 8 },
  "schedule": { "epochs": 6, "validate_every": 1 }
}
"#;

const SMOKE_CONFIG: &str = r#"{
  "model": { "n_levels": 1, "base_kernels": 2 },
  "sampling": { "stride_pos": 8 },
  "schedule": { "epochs": 2, "validate_every": 1 }
}
"#;

fn ynet(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ynet"))
        .args(args)
        .output()
        .map_err(|e| format!("spawning ynet: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "ynet {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Parses the data row of an `eval` CSV into its five metrics.
fn eval_row(csv: &str) -> Result<EvalRow, String> {
    let row = csv.lines().nth(1).ok_or("eval printed no data row")?;
    let v: Vec<f64> = row.split(',').skip(1).map(|s| s.parse().map_err(|_| format!("bad CSV field {s}"))).collect::<Result<_, _>>()?;
    Ok(EvalRow {
        sensitivity: v[1],
        precision: v[3],
        dsc: v[4],
    })
}

struct EvalRow {
    sensitivity: f64,
    precision: f64,
    dsc: f64,
}

/// Shared state of the end-to-end criteria.
struct Pipeline {
    root: PathBuf,
    data: PathBuf,
    desk: PathBuf,
    ynet_eval: Option<EvalRow>,
}

impl Pipeline {
    fn new(root: &Path) -> Result<Self, String> {
        let data = root.join("data");
        let desk = root.join("desk.json");
        fs::create_dir_all(root).map_err(|e| e.to_string())?;
        fs::write(&desk, DESK_CONFIG).map_err(|e| e.to_string())?;
        ynet(&["phantom", "--seed", "7", "--train", "8", "--val", "2", "--test", "1", "--out", path_str(&data)])?;
        Ok(Pipeline {
            root: root.to_path_buf(),
            data,
            desk,
            ynet_eval: None,
        })
    }

    fn test_image(&self) -> PathBuf {
        self.data.join("test000.img.yvol")
    }

    fn test_label(&self) -> PathBuf {
        self.data.join("test000.lbl.yvol")
    }

    fn eval(&self, pred: &Path, name: &str) -> Result<EvalRow, String> {
        eval_row(&ynet(&["eval", "--pred", path_str(pred), "--truth", path_str(&self.test_label()), "--name", name])?)
    }

    fn criterion_3(&mut self) -> Outcome {
        let start = Instant::now();
        let run = self.root.join("desk");
        let (cfg, data, run_s) = (path_str(&self.desk), path_str(&self.data), path_str(&run));
        ynet(&["--config", cfg, "train", "--data", data, "--out", run_s])?;
        ynet(&["--config", cfg, "predict", "--data", data, "--out", run_s, "--input", path_str(&self.test_image())])?;
        let row = self.eval(&run.join("test000.label.yvol"), "ynet")?;
        let dsc = row.dsc;
        self.ynet_eval = Some(row);
        let secs = start.elapsed().as_secs_f64();
        ensure(dsc >= 0.75, || format!("test DSC {dsc:.4} < 0.75"))?;
        ensure(secs <= 1800.0, || format!("took {secs:.0}s"))?;
        Ok(format!("test DSC {dsc:.4} >= 0.75 in {secs:.0}s"))
    }

    fn criterion_4(&self) -> Outcome {
        let ynet_dsc = self.ynet_eval.as_ref().ok_or("criterion 3 produced no Y-net evaluation")?.dsc;
        let out = self.root.join("baselines");
        let mut rows = BTreeMap::new();
        for method in ["renyi", "phansalkar", "frangi"] {
            ynet(&[
                "baseline",
                "--method",
                method,
                "--data",
                path_str(&self.data),
                "--out",
                path_str(&out),
                "--input",
                path_str(&self.test_image()),
            ])?;
            rows.insert(method, self.eval(&out.join(format!("test000.{method}.yvol")), method)?);
        }
        let (renyi, frangi, phans) = (rows["renyi"].dsc, rows["frangi"].dsc, &rows["phansalkar"]);
        let summary = format!(
            "Y-net {ynet_dsc:.4} > Frangi {frangi:.4} > Renyi {renyi:.4}; Phansalkar sensitivity {:.3}, precision {:.3}",
            phans.sensitivity, phans.precision
        );
        ensure(ynet_dsc > frangi && frangi > renyi, || format!("ordering fails: {summary}"))?;
        ensure(phans.sensitivity > 0.85 && phans.precision < 0.5, || format!("Phansalkar fails: {summary}"))?;
        Ok(summary)
    }

    fn criterion_5(&self) -> Outcome {
        let run = self.root.join("ablation");
        let (cfg, data, run_s) = (path_str(&self.desk), path_str(&self.data), path_str(&run));
        ynet(&["--config", cfg, "train", "--position-site", "none", "--data", data, "--out", run_s])?;
        let model = YNetModel::<f32>::load_checkpoint(run.join("best.ynet")).map_err(|e| e.to_string())?;
        ensure(model.config().position_site == PositionSite::None, || "checkpoint keeps a position path".into())?;
        let log = fs::read_to_string(run.join("train_log.csv")).map_err(|e| e.to_string())?;
        let epochs = log.lines().count() - 1;
        ensure(epochs == 6, || format!("ablation ran {epochs} epochs, expected 6"))?;
        ynet(&["--config", cfg, "predict", "--data", data, "--out", run_s, "--input", path_str(&self.test_image())])?;
        let prob = read_volume(run.join("test000.prob.yvol")).map_err(|e| e.to_string())?;
        ensure(prob.kind() == VolumeKind::Probability, || "prediction is not a probability volume".into())?;
        let dsc = self.eval(&run.join("test000.label.yvol"), "ynet_no_position")?.dsc;
        Ok(format!("{epochs} epochs, valid checkpoint without position path; test DSC {dsc:.4} (not asserted)"))
    }
}

/// Files whose bytes must agree between two runs, relative to a run root.
const DETERMINISTIC_FILES: &[&str] = &[
    "data/manifest.json",
    "data/train000.img.yvol",
    "data/train000.lbl.yvol",
    "data/test000.img.yvol",
    "run/best.ynet",
    "run/threshold.json",
    "run/test000.prob.yvol",
    "run/test000.label.yvol",
    "run/test000.label.mip_z.pgm",
    "eval.csv",
];

/// Train log without the wall-clock column.
fn log_without_seconds(path: &Path) -> Result<Vec<String>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    Ok(text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned()).collect())
}

fn deterministic_chain(root: &Path) -> Result<(), String> {
    let (data, run) = (root.join("data"), root.join("run"));
    let cfg = root.join("smoke.json");
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    fs::write(&cfg, SMOKE_CONFIG).map_err(|e| e.to_string())?;
    let (cfg, data_s, run_s) = (path_str(&cfg), path_str(&data), path_str(&run));
    let t = ["--threads", "1", "--config", cfg];
    ynet(&[&t[..], &["phantom", "--train", "2", "--val", "1", "--test", "1", "--out", data_s]].concat())?;
    ynet(&[&t[..], &["train", "--data", data_s, "--out", run_s]].concat())?;
    let test = data.join("test000.img.yvol");
    ynet(&[&t[..], &["predict", "--data", data_s, "--out", run_s, "--input", path_str(&test)]].concat())?;
    let eval_out = root.join("eval.csv");
    ynet(&[
        "--threads",
        "1",
        "eval",
        "--pred",
        path_str(&run.join("test000.label.yvol")),
        "--truth",
        path_str(&data.join("test000.lbl.yvol")),
        "--out",
        path_str(&eval_out),
    ])?;
    Ok(())
}

fn criterion_9(root: &Path) -> Outcome {
    let (a, b) = (root.join("det_a"), root.join("det_b"));
    deterministic_chain(&a)?;
    deterministic_chain(&b)?;
    for rel in DETERMINISTIC_FILES {
        let read = |r: &Path| fs::read(r.join(rel)).map_err(|e| format!("{rel}: {e}"));
        ensure(read(&a)? == read(&b)?, || format!("{rel} differs between runs"))?;
    }
    let (la, lb) = (log_without_seconds(&a.join("run/train_log.csv"))?, log_without_seconds(&b.join("run/train_log.csv"))?);
    ensure(la == lb, || "train_log.csv losses differ between runs".into())?;
    Ok(format!(
        "{} files byte-identical across two --threads 1 runs; train log equal apart from wall-clock seconds",
        DETERMINISTIC_FILES.len()
    ))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn report(id: usize, title: &str, outcome: &Outcome) {
    match outcome {
        Ok(detail) => println!("criterion {id} PASS  {title}: {detail}"),
        Err(why) => println!("criterion {id} FAIL  {title}: {why}"),
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut failures = 0;
    let mut record = |id: usize, title: &str, outcome: Outcome| {
        report(id, title, &outcome);
        if outcome.is_err() {
            failures += 1;
        }
    };

    record(1, "gradient correctness", guarded(criterion_1));
    record(2, "oracle equivalence", guarded(criterion_2));
    match guarded(|| Pipeline::new(&root.join("e2e"))) {
        Ok(mut p) => {
            record(3, "end-to-end phantom learning", guarded(|| p.criterion_3()));
            record(4, "ranking reproduction", guarded(|| p.criterion_4()));
            record(5, "ablation trains", guarded(|| p.criterion_5()));
        }
        Err(why) => {
            for (id, title) in [
                (3, "end-to-end phantom learning"),
                (4, "ranking reproduction"),
                (5, "ablation trains"),
            ] {
                record(id, title, Err(format!("dataset generation failed: {why}")));
            }
        }
    }
    record(6, "prediction assembly", guarded(criterion_6));
    record(7, "threshold calibration", guarded(criterion_7));
    record(8, "Frangi sanity", guarded(criterion_8));
    record(9, "determinism", guarded(|| criterion_9(root)));

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
