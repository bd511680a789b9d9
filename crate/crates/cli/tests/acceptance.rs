//! Acceptance suite: every release gate runs here, in order, sharing
//! artifacts (datasets feed training, trained teachers feed the
//! generation suites). One pass/fail line prints per criterion and the
//! full report lands in target/acceptance_report.txt; run with
//! `cargo test -p como --test acceptance -- --nocapture` to watch it.
//!
//! The heavy gates (7, 8, 9) train real teachers and run the full
//! 5-prompt x 3-seed generation suite under all four configs; expect
//! the whole suite to take on the order of an hour on a small CPU.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use como_core::diffusion::{
    heldout_loss, make_schedule, q_sample, train_denoiser, TrainConfig, WeightMode,
};
use como_core::distill::{
    generate, l_sds_step_at, lmsd_step_at, mv_sds_step_at, AblationVariant, ColaChain,
    ColaDenoiser, GenConfig, LayoutDenoiser, MultiviewDenoiser,
};
use como_core::metrics::{ablation_report, builtin_prompt_suite, AblationTable};
use como_core::numcore::{backward, forward, CheckMode, LayerSpec, Rng, Tensor};
use como_core::render::{render, render_with_grad, Camera, Image, VoxelScene};
use como_core::teachers::{
    critic_slot_accuracy, train_critic, CriticTrainConfig, DenoiserNet, LayoutModel,
    MultiviewModel, TeacherSet,
};
use como_core::world::{read_dataset, Dataset, ScenePrompt};

type Outcome = Result<String, String>;

struct Report {
    lines: Vec<(String, Outcome)>,
}

impl Report {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("[PASS] criterion {name}: {detail} ({secs:.1}s)"),
            Err(detail) => format!("[FAIL] criterion {name}: {detail} ({secs:.1}s)"),
        };
        println!("{line}");
        self.lines.push((line, outcome));
    }
}

fn como() -> Command {
    Command::new(env!("CARGO_BIN_EXE_como"))
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

fn random_scene(dim: usize, seed: u64) -> VoxelScene {
    let mut rng = Rng::new(seed);
    let mut scene = VoxelScene::new(dim, 0.0, 0.0, 4.0);
    for v in scene.density_raw.data_mut() {
        *v = rng.uniform_in(-2.0, 2.0);
    }
    for v in scene.color_raw.data_mut() {
        *v = rng.uniform_in(-2.0, 2.0);
    }
    scene
}

/// Criterion 1: directional derivatives of the renderer match central
/// finite differences at rel err < 1e-3 on 10 random 8^3 scenes.
fn renderer_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let scene = random_scene(8, 900 + seed);
        let cam = Camera::new(36.0 * seed as f64, 12.0, 3.6, 60.0).unwrap();
        let (res, spr) = (16, 8);
        let mut rng = Rng::new(seed);
        let gpix = rng.normal_tensor(&[res, res, 3]);
        let (gd, gc) = render_with_grad(&scene, &cam, res, spr, &gpix).unwrap();
        let vd = rng.normal_tensor(gd.shape());
        let vc = rng.normal_tensor(gc.shape());
        let analytic = gd.dot(&vd) + gc.dot(&vc);
        let h = 1e-5;
        let loss = |s: &VoxelScene| render(s, &cam, res, spr).pixels.dot(&gpix);
        let mut up = scene.clone();
        up.density_raw.add_scaled(&vd, h);
        up.color_raw.add_scaled(&vc, h);
        let mut dn = scene.clone();
        dn.density_raw.add_scaled(&vd, -h);
        dn.color_raw.add_scaled(&vc, -h);
        let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-3 && secs < 60.0,
        format!("worst rel err {worst:.2e} (< 1e-3), {secs:.1}s (< 60s)"),
    )
}

/// Criterion 2: every layer kind passes finite differences at rel err
/// < 1e-4 over 20 seeds.
fn layer_gradient_fidelity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(7000 + seed);
        let net = vec![
            LayerSpec::conv3x3(2, 3, &mut rng),
            LayerSpec::silu(),
            LayerSpec::concat_condition(3),
            LayerSpec::conv3x3(6, 2, &mut rng),
            LayerSpec::softplus(),
            LayerSpec::linear(2 * 5 * 5, 4, &mut rng),
        ];
        let input = rng.normal_tensor(&[2, 5, 5]);
        let cond = rng.normal_tensor(&[3]);
        let (out, cache) = forward(&net, &input, Some(&cond)).unwrap();
        let proj = rng.normal_tensor(out.shape());
        let res = backward(&net, &cache, &proj).unwrap();

        let loss = |net: &[LayerSpec], input: &Tensor, cond: &Tensor| -> f64 {
            forward(net, input, Some(cond)).unwrap().0.dot(&proj)
        };
        let h = 1e-5;
        let mut net = net;
        for li in 0..net.len() {
            if !net[li].has_params() {
                continue;
            }
            let (gw, gb) = res.grad_params[li].as_ref().unwrap();
            for (which, g) in [(0, gw), (1, gb)] {
                // Three probes per tensor keep this fast.
                let len = g.len();
                for e in [0, len / 2, len - 1] {
                    let orig = {
                        let t = if which == 0 { &mut net[li].weights } else { &mut net[li].biases };
                        let v = t.data()[e];
                        t.data_mut()[e] = v + h;
                        v
                    };
                    let up = loss(&net, &input, &cond);
                    {
                        let t = if which == 0 { &mut net[li].weights } else { &mut net[li].biases };
                        t.data_mut()[e] = orig - h;
                    }
                    let dn = loss(&net, &input, &cond);
                    {
                        let t = if which == 0 { &mut net[li].weights } else { &mut net[li].biases };
                        t.data_mut()[e] = orig;
                    }
                    let fd = (up - dn) / (2.0 * h);
                    let an = g.data()[e];
                    if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                        worst = worst.max(rel);
                    }
                }
            }
        }
    }
    check(worst < 1e-4, format!("worst rel err {worst:.2e} (< 1e-4)"))
}

/// Criterion 3: q_sample moments match the closed form within 3 sigma
/// over 1e5 draws at 5 timesteps.
fn noising_statistics() -> Outcome {
    let s = make_schedule(64, 1e-4, 0.02, WeightMode::OneMinusAlphaBar).unwrap();
    let mut rng = Rng::new(31137);
    let x0 = 0.62f64;
    let n = 100_000usize;
    let mut detail = String::new();
    for &t in &[1usize, 13, 29, 47, 64] {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps = Tensor::scalar(rng.normal());
            let v = q_sample(&Tensor::scalar(x0), t, &eps, &s).unwrap().data()[0];
            sum += v;
            sum_sq += v * v;
        }
        let ab = s.alpha_bar(t);
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let (em, ev) = (ab.sqrt() * x0, 1.0 - ab);
        let sigma_mean = (ev / n as f64).sqrt();
        let sigma_var = ev * (2.0 / n as f64).sqrt();
        if (mean - em).abs() >= 3.0 * sigma_mean {
            return Err(format!("t={t}: mean {mean:.5} vs {em:.5} beyond 3 sigma"));
        }
        if (var - ev).abs() >= 3.0 * sigma_var {
            return Err(format!("t={t}: var {var:.5} vs {ev:.5} beyond 3 sigma"));
        }
        detail = format!("last t={t}: mean dev {:.2} sigma, var dev {:.2} sigma",
            (mean - em).abs() / sigma_mean, (var - ev).abs() / sigma_var);
    }
    Ok(format!("5 timesteps within 3 sigma; {detail}"))
}

struct EchoEps(Tensor);

impl LayoutDenoiser for EchoEps {
    fn predict_layout(&self, _x: &Tensor, _t: usize, _p: &ScenePrompt) -> Tensor {
        self.0.clone()
    }
}

impl MultiviewDenoiser for EchoEps {
    fn predict_mv(&self, _x: &Tensor, _t: usize, _r: &Tensor, _c: &Camera, _f: &Camera) -> Tensor {
        self.0.clone()
    }
}

/// Criterion 4: gradients vanish exactly when the teacher predicts the
/// injected noise.
fn sds_fixed_point() -> Outcome {
    let cfg = GenConfig {
        grid_dim: 12,
        render_res: 12,
        samples_per_ray: 8,
        schedule_t: 16,
        ..GenConfig::default()
    };
    let schedule = cfg.schedule().unwrap();
    let scene = random_scene(cfg.grid_dim, 41);
    let cam = Camera::new(75.0, 18.0, cfg.camera_radius, cfg.fov_deg).unwrap();
    let mut rng = Rng::new(42);
    let eps = rng.normal_tensor(&[cfg.render_res, cfg.render_res, 3]);
    let echo = EchoEps(eps.clone());
    let prompt = builtin_prompt_suite()[0].1.clone();

    let ((gd, gc), _) =
        l_sds_step_at(&scene, &echo, &prompt, &schedule, &cam, &cfg, 7, &eps).unwrap();
    let layout_zero = gd.data().iter().all(|&v| v == 0.0) && gc.data().iter().all(|&v| v == 0.0);

    let prior = Image::new(cfg.render_res);
    let ((gd, gc), _) =
        mv_sds_step_at(&scene, &echo, &prior, &schedule, &cam, &cfg, 7, &eps).unwrap();
    let mv_zero = gd.data().iter().all(|&v| v == 0.0) && gc.data().iter().all(|&v| v == 0.0);

    check(
        layout_zero && mv_zero,
        format!("layout gradients all zero: {layout_zero}, multi-view: {mv_zero}"),
    )
}

/// The mean of the two real teachers, entering through the fine-tuned
/// slot; makes the unified residual cancel exactly.
struct MeanOfTeachers<'a> {
    teachers: &'a TeacherSet,
    prior: &'a Image,
}

impl ColaDenoiser for MeanOfTeachers<'_> {
    fn predict_cola(
        &self,
        x_t: &Tensor,
        t: usize,
        prompt: &ScenePrompt,
        camera: &Camera,
        reference: &Camera,
    ) -> Tensor {
        let l = self.teachers.layout.predict_layout(x_t, t, prompt);
        let m = self
            .teachers
            .multiview
            .predict_mv(x_t, t, &self.prior.pixels, camera, reference);
        let mut sum = l;
        sum.add_scaled(&m, 1.0);
        sum.scale(0.5);
        sum
    }
}

/// Criterion 5: the unified gradient vanishes exactly when the
/// fine-tuned model outputs the mean of the two teachers.
fn lmsd_symmetry(teachers: &TeacherSet, cfg: &GenConfig) -> Outcome {
    let schedule = cfg.schedule().unwrap();
    let scene = random_scene(cfg.grid_dim, 51);
    let cam = Camera::new(203.0, 5.0, cfg.camera_radius, cfg.fov_deg).unwrap();
    let mut rng = Rng::new(52);
    let prior = Image {
        pixels: rng.normal_tensor(&[cfg.render_res, cfg.render_res, 3]),
    };
    let eps = rng.normal_tensor(&[cfg.render_res, cfg.render_res, 3]);
    let mean = MeanOfTeachers {
        teachers,
        prior: &prior,
    };
    let prompt = builtin_prompt_suite()[1].1.clone();
    let ((gd, gc), mag) = lmsd_step_at(
        &scene,
        &teachers.layout,
        &teachers.multiview,
        &mean,
        &prompt,
        &prior,
        &schedule,
        &cam,
        cfg,
        9,
        &eps,
    )
    .unwrap();
    let zero = gd.data().iter().all(|&v| v == 0.0) && gc.data().iter().all(|&v| v == 0.0);
    check(zero && mag == 0.0, format!("residual magnitude {mag}, gradients all zero: {zero}"))
}

/// Criterion 6: merging preserves the adapted function within 1e-6 on
/// 100 random inputs, and a fresh adapter equals the base exactly.
fn cola_algebra(teachers: &TeacherSet, cfg: &GenConfig) -> Outcome {
    let mut rng = Rng::new(61);
    let mut chain = ColaChain::new(&teachers.layout, cfg.lora_rank, cfg.lora_scale, 100, 1e-2, &mut rng).unwrap();
    let prompt = builtin_prompt_suite()[0].1.clone();
    let front = cfg.front_camera();

    // Fresh adapter (B = 0): adapted forward equals base forward
    // exactly.
    let x_probe = rng.normal_tensor(&[cfg.render_res, cfg.render_res, 3]);
    let a = chain.adapted().cola_denoise(&x_probe, 3, &prompt, &front, &front).unwrap();
    let b = chain.base.cola_denoise(&x_probe, 3, &prompt, &front, &front).unwrap();
    if a != b {
        return Err("fresh adapter does not reproduce the base exactly".into());
    }

    // Make the adapters non-trivial, then merge.
    for _ in 0..15 {
        let x_t = rng.normal_tensor(&[cfg.render_res, cfg.render_res, 3]);
        let eps = rng.normal_tensor(&[cfg.render_res, cfg.render_res, 3]);
        let cam = Camera::new(rng.uniform_in(0.0, 360.0), 10.0, cfg.camera_radius, cfg.fov_deg).unwrap();
        chain.adapter_step(&x_t, 5, &eps, &prompt, &cam, &front).unwrap();
    }
    let pre = chain.adapted();
    chain.merge(&mut rng);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let x_t = rng.normal_tensor(&[cfg.render_res, cfg.render_res, 3]);
        let t = 1 + (i % 16);
        let was = pre.cola_denoise(&x_t, t, &prompt, &front, &front).unwrap();
        let now = chain.base.cola_denoise(&x_t, t, &prompt, &front, &front).unwrap();
        worst = worst.max(was.max_abs_diff(&now));
    }
    check(
        worst < 1e-6,
        format!("merged-base vs pre-merge max |diff| {worst:.2e} over 100 inputs (< 1e-6)"),
    )
}

struct TrainedArtifacts {
    teachers: TeacherSet,
    ckpt_dir: PathBuf,
    data_dir: PathBuf,
}

/// Criterion 7: desk-scale training reduces held-out loss by >= 40%
/// for both teachers and reaches critic accuracy >= 0.85, within 30
/// minutes.
fn teacher_learnability(work: &Path) -> Result<(TrainedArtifacts, String), String> {
    let start = Instant::now();
    let data_dir = work.join("data");
    let status = como()
        .args([
            "gen-data",
            "--out",
            data_dir.to_str().unwrap(),
            "--n-layout",
            "2000",
            "--n-mv",
            "2000",
            "--views-per-scene",
            "4",
            "--seed-data",
            "11",
        ])
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err("dataset generation failed".into());
    }

    let Ok(Dataset::Layout(layout_records)) = read_dataset(&data_dir.join("layout.ds")) else {
        return Err("cannot read layout dataset".into());
    };
    let Ok(Dataset::Multiview(mv_records)) = read_dataset(&data_dir.join("multiview.ds")) else {
        return Err("cannot read multi-view dataset".into());
    };
    let schedule = make_schedule(64, 1e-4, 0.02, WeightMode::OneMinusAlphaBar).unwrap();
    let train_cfg = TrainConfig {
        steps: 4000,
        batch: 8,
        lr: 2e-3,
        check: CheckMode::Fast,
    };

    let split = layout_records.len() * 9 / 10;
    let (layout_train, layout_held) = layout_records.split_at(split);
    let mut rng = Rng::new(7);
    let mut layout = LayoutModel(DenoiserNet::new_layout(64, &mut rng));
    let layout_init = heldout_loss(&layout, layout_held, &schedule, 4, 0xACC7);
    train_denoiser(&mut layout, layout_train, &schedule, &train_cfg, &mut rng)
        .map_err(|e| e.to_string())?;
    let layout_final = heldout_loss(&layout, layout_held, &schedule, 4, 0xACC7);
    let layout_red = 1.0 - layout_final / layout_init;

    let split = mv_records.len() * 9 / 10;
    let (mv_train, mv_held) = mv_records.split_at(split);
    let mut rng = Rng::new(8);
    let res = mv_records[0].ref_image.shape()[0];
    let mut mv = MultiviewModel(DenoiserNet::new_multiview(64, res, &mut rng));
    let mv_init = heldout_loss(&mv, mv_held, &schedule, 4, 0xACC8);
    train_denoiser(&mut mv, mv_train, &schedule, &train_cfg, &mut rng).map_err(|e| e.to_string())?;
    let mv_final = heldout_loss(&mv, mv_held, &schedule, 4, 0xACC8);
    let mv_red = 1.0 - mv_final / mv_init;

    let split = layout_records.len() * 9 / 10;
    let (ctrain, cheld) = layout_records.split_at(split);
    let mut rng = Rng::new(9);
    let (critic, _) = train_critic(
        ctrain,
        &CriticTrainConfig {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            noise_aug: 0.03,
        },
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let acc = critic_slot_accuracy(&critic, cheld);

    let mins = start.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "layout held-out -{:.0}%, multi-view -{:.0}%, critic acc {acc:.3}, {mins:.1} min",
        layout_red * 100.0,
        mv_red * 100.0
    );
    if layout_red < 0.40 || mv_red < 0.40 || acc < 0.85 || mins > 30.0 {
        return Err(detail);
    }

    let teachers = TeacherSet {
        layout: layout.0,
        multiview: mv.0,
        critic,
    };
    let ckpt_dir = work.join("ckpt");
    teachers.save(&ckpt_dir).map_err(|e| e.to_string())?;
    Ok((
        TrainedArtifacts {
            teachers,
            ckpt_dir,
            data_dir,
        },
        detail,
    ))
}

/// Criteria 8 and 9 share the generation suite: 5 prompts x 3 seeds
/// under the full config (criterion 8, timed) plus the three ablation
/// configs (criterion 9).
fn generation_suites(
    artifacts: &TrainedArtifacts,
    cfg: &GenConfig,
) -> (Result<(AblationTable, String), String>, Option<AblationTable>) {
    let suite = builtin_prompt_suite();
    let seeds = [3u64, 4, 5];

    let start = Instant::now();
    let full = match ablation_report(
        &suite,
        cfg,
        &artifacts.teachers,
        &seeds,
        &[AblationVariant::Full],
    ) {
        Ok(t) => t,
        Err(e) => return (Err(e.to_string()), None),
    };
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let s = full.summary_of(AblationVariant::Full).clone();
    let detail = format!(
        "mean IoU {:.3} (>= 0.45), exact count {:.0}% (>= 60%), {mins:.1} min (< 90)",
        s.mean_iou,
        s.count_accuracy * 100.0
    );
    let crit8 = if s.mean_iou >= 0.45 && s.count_accuracy >= 0.60 && mins < 90.0 {
        Ok((full.clone(), detail))
    } else {
        Err(detail)
    };
    (crit8, Some(full))
}

fn ablation_directionality(
    artifacts: &TrainedArtifacts,
    cfg: &GenConfig,
    full_table: AblationTable,
    out_csv: &Path,
) -> Outcome {
    let suite = builtin_prompt_suite();
    let seeds = [3u64, 4, 5];
    let rest = ablation_report(
        &suite,
        cfg,
        &artifacts.teachers,
        &seeds,
        &[
            AblationVariant::NoLsds,
            AblationVariant::NoMvsds,
            AblationVariant::NoLmsd,
        ],
    )
    .map_err(|e| e.to_string())?;
    let mut cells = full_table.cells;
    cells.extend(rest.cells);
    let table = AblationTable::from_cells(cells);
    let _ = std::fs::write(out_csv, table.csv());
    println!("{}", table.table());

    let full = table.summary_of(AblationVariant::Full);
    let no_lsds = table.summary_of(AblationVariant::NoLsds);
    let no_mvsds = table.summary_of(AblationVariant::NoMvsds);
    let no_lmsd = table.summary_of(AblationVariant::NoLmsd);

    let full_beats_all = full.aggregate > no_lsds.aggregate
        && full.aggregate > no_mvsds.aggregate
        && full.aggregate > no_lmsd.aggregate;
    let mvsds_lowest_consistency = no_mvsds.mean_consistency < full.mean_consistency
        && no_mvsds.mean_consistency < no_lsds.mean_consistency
        && no_mvsds.mean_consistency < no_lmsd.mean_consistency;
    let lsds_lowest_iou = no_lsds.mean_iou < full.mean_iou
        && no_lsds.mean_iou < no_mvsds.mean_iou
        && no_lsds.mean_iou < no_lmsd.mean_iou;

    check(
        full_beats_all && mvsds_lowest_consistency && lsds_lowest_iou,
        format!(
            "aggregates full {:.3} / no_lsds {:.3} / no_mvsds {:.3} / no_lmsd {:.3}; \
             full beats all: {full_beats_all}; no_mvsds lowest consistency ({:.3}): {mvsds_lowest_consistency}; \
             no_lsds lowest IoU ({:.3}): {lsds_lowest_iou}",
            full.aggregate,
            no_lsds.aggregate,
            no_mvsds.aggregate,
            no_lmsd.aggregate,
            no_mvsds.mean_consistency,
            no_lsds.mean_iou
        ),
    )
}

/// Criterion 10: repeated runs with identical seeds produce
/// byte-identical artifacts.
fn determinism(artifacts: &TrainedArtifacts, work: &Path) -> Outcome {
    // Datasets.
    let (da, db) = (work.join("det_a"), work.join("det_b"));
    for out in [&da, &db] {
        let status = como()
            .args([
                "gen-data",
                "--out",
                out.to_str().unwrap(),
                "--n-layout",
                "300",
                "--n-mv",
                "300",
                "--views-per-scene",
                "3",
                "--seed-data",
                "77",
            ])
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err("gen-data failed".into());
        }
    }
    let layout_same = std::fs::read(da.join("layout.ds")).map_err(|e| e.to_string())?
        == std::fs::read(db.join("layout.ds")).map_err(|e| e.to_string())?;
    let mv_same = std::fs::read(da.join("multiview.ds")).map_err(|e| e.to_string())?
        == std::fs::read(db.join("multiview.ds")).map_err(|e| e.to_string())?;

    // Generation runs (short loop; the criterion is bit equality).
    let (ra, rb) = (work.join("run_a"), work.join("run_b"));
    for out in [&ra, &rb] {
        let status = como()
            .args([
                "generate",
                "--teachers",
                artifacts.ckpt_dir.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--prompt",
                "one:sphere:red,one:sphere:blue",
                "--box",
                "0.15,0.40,0.37,0.62",
                "--box",
                "0.63,0.40,0.85,0.62",
                "--steps",
                "40",
                "--seed-gen",
                "123",
            ])
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err("generate failed".into());
        }
    }
    let scene_same = std::fs::read(ra.join("scene.cvox")).map_err(|e| e.to_string())?
        == std::fs::read(rb.join("scene.cvox")).map_err(|e| e.to_string())?;

    check(
        layout_same && mv_same && scene_same,
        format!(
            "datasets byte-identical: {}, scene.cvox byte-identical: {scene_same}",
            layout_same && mv_same
        ),
    )
}

/// Criterion 11: generate runs never touch teacher weights.
fn teacher_immutability(artifacts: &TrainedArtifacts, cfg: &GenConfig) -> Outcome {
    let files = ["layout.wts", "multiview.wts", "critic.wts"];
    let before_files: Vec<Vec<u8>> = files
        .iter()
        .map(|f| std::fs::read(artifacts.ckpt_dir.join(f)).unwrap())
        .collect();
    let before_mem = artifacts.teachers.checksum();

    let mut run_cfg = cfg.clone();
    run_cfg.total_steps = 40;
    run_cfg.seed = 4321;
    let prompt = builtin_prompt_suite()[2].1.clone();
    generate(&prompt, &run_cfg, &artifacts.teachers, None).map_err(|e| e.to_string())?;

    let after_mem = artifacts.teachers.checksum();
    let files_same = files
        .iter()
        .zip(&before_files)
        .all(|(f, before)| std::fs::read(artifacts.ckpt_dir.join(f)).unwrap() == *before);
    check(
        before_mem == after_mem && files_same,
        format!(
            "in-memory checksum unchanged: {}, checkpoint files unchanged: {files_same}",
            before_mem == after_mem
        ),
    )
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let work_keep = tempfile::tempdir().unwrap();
    let work = work_keep.path().to_path_buf();
    let mut report = Report { lines: Vec::new() };

    report.run("1 (renderer gradient fidelity)", renderer_gradient_fidelity);
    report.run("2 (layer gradient fidelity)", layer_gradient_fidelity);
    report.run("3 (noising statistics)", noising_statistics);
    report.run("4 (SDS fixed point)", sds_fixed_point);

    // Criteria 5 and 6 use small untrained denoisers; the identities
    // are architectural, not statistical.
    let small_cfg = GenConfig {
        grid_dim: 12,
        render_res: 16,
        samples_per_ray: 8,
        schedule_t: 16,
        ..GenConfig::default()
    };
    let small_teachers = {
        let mut rng = Rng::new(5005);
        TeacherSet {
            layout: DenoiserNet::new_layout(small_cfg.schedule_t, &mut rng),
            multiview: DenoiserNet::new_multiview(small_cfg.schedule_t, small_cfg.render_res, &mut rng),
            critic: como_core::teachers::CriticNet::new(small_cfg.render_res, &mut rng),
        }
    };
    report.run("5 (LMSD symmetry)", || lmsd_symmetry(&small_teachers, &small_cfg));
    report.run("6 (COLA algebra)", || cola_algebra(&small_teachers, &small_cfg));

    // Criterion 7 trains the real teachers; later criteria reuse them.
    let mut artifacts: Option<TrainedArtifacts> = None;
    report.run("7 (teacher learnability)", || {
        match teacher_learnability(&work) {
            Ok((a, detail)) => {
                artifacts = Some(a);
                Ok(detail)
            }
            Err(e) => Err(e),
        }
    });

    let gen_cfg = GenConfig::default();
    if let Some(artifacts) = &artifacts {
        let mut full_table: Option<AblationTable> = None;
        report.run("8 (end-to-end layout control)", || {
            let (outcome, table) = generation_suites(artifacts, &gen_cfg);
            full_table = table;
            outcome.map(|(_, detail)| detail)
        });
        if let Some(full_table) = full_table {
            report.run("9 (ablation directionality)", || {
                ablation_directionality(
                    artifacts,
                    &gen_cfg,
                    full_table,
                    &work.join("ablation.csv"),
                )
            });
        } else {
            report.run("9 (ablation directionality)", || {
                Err("skipped: criterion 8 produced no table".into())
            });
        }
        report.run("10 (determinism)", || determinism(artifacts, &work));
        report.run("11 (teacher-weight immutability)", || {
            teacher_immutability(artifacts, &gen_cfg)
        });
    } else {
        for name in [
            "8 (end-to-end layout control)",
            "9 (ablation directionality)",
            "10 (determinism)",
            "11 (teacher-weight immutability)",
        ] {
            report.run(name, || Err("skipped: teacher training failed".into()));
        }
    }

    let text: String = report
        .lines
        .iter()
        .map(|(l, _)| format!("{l}\n"))
        .collect();
    let report_path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/acceptance_report.txt");
    let _ = std::fs::write(&report_path, &text);
    println!("\n{text}");

    let failures: Vec<&String> = report
        .lines
        .iter()
        .filter(|(_, o)| o.is_err())
        .map(|(l, _)| l)
        .collect();
    assert!(
        failures.is_empty(),
        "{} acceptance criteria failed:\n{}",
        failures.len(),
        failures.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n")
    );
}
