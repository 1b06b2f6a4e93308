//! One function per subcommand. Every command reads only files written by
//! earlier commands (plus the config) and writes through [`Run`].

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use ndarray::{Array3, Axis, Ix3};
use serde::{Deserialize, Serialize};
use ufloss::container::Container;
use ufloss::cs_baseline::pics_reconstruct;
use ufloss::data::{
    dataset_from_container, dataset_to_container, make_phantom_dataset, samples_from_container, samples_to_container,
    Dataset, Patch, Split,
};
use ufloss::encode::{simulate_dataset, KSpaceSample};
use ufloss::eval::{
    correlation_map, deblur_descent, line_search_alpha, nrmse, perturb_blur, perturbation_study, retrieve_neighbors,
    spearman, ssim, ssim_correlation_map, MetricsRow, Perturbation, StudyCurve, Summary,
};
use ufloss::featnet::{featnet_from_container, featnet_to_container, pretrain_with, sample_instances, FeatNet};
use ufloss::ufloss::ufloss;
use ufloss::unrolled::{modl_forward, recon_from_container, recon_to_container, train_modl_with, ReconNet};
use ufloss::CImage;

use crate::artifacts::{load_container, read_csv, Run};
use crate::images::{heatmap, magnitude_gray, max_magnitude, montage};

pub const METHODS: [&str; 4] = ["zero-filled", "pics", "modl-l2", "modl-ufloss"];

const SPLITS: [(Split, &str); 3] = [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum LossKind {
    L2,
    Ufloss,
}

impl LossKind {
    pub fn method(self) -> &'static str {
        match self {
            LossKind::L2 => "modl-l2",
            LossKind::Ufloss => "modl-ufloss",
        }
    }
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
}

fn data_path(split: &str) -> String {
    format!("data/{split}.npz")
}

fn kspace_path(split: &str) -> String {
    format!("kspace/{split}.npz")
}

fn recon_path(method: &str) -> String {
    format!("recon/{method}.npz")
}

const UFNET: &str = "checkpoints/ufnet.npz";

fn load_dataset(run: &Run, split: &str) -> Result<Dataset<f32>> {
    let p = run.require(&data_path(split))?;
    dataset_from_container(&load_container(&p)?).with_context(|| format!("decoding {}", p.display()))
}

fn load_samples(run: &Run, split: &str) -> Result<Vec<KSpaceSample<f32>>> {
    load_samples_at(&run.require(&kspace_path(split))?)
}

fn load_samples_at(p: &Path) -> Result<Vec<KSpaceSample<f32>>> {
    samples_from_container(&load_container(p)?).with_context(|| format!("decoding {}", p.display()))
}

fn load_ufnet(run: &Run) -> Result<ufloss::featnet::FeatCheckpoint<f32>> {
    let p = run.require(UFNET)?;
    featnet_from_container(&load_container(&p)?).with_context(|| format!("decoding {}", p.display()))
}

fn slice_id(i: usize) -> String {
    format!("test-{i:03}")
}

fn images_container(images: &[CImage<f32>]) -> Result<Container> {
    ensure!(!images.is_empty(), "no images to store");
    let (h, w) = images[0].dim();
    let mut stack = Array3::zeros((images.len(), h, w));
    for (mut dst, img) in stack.outer_iter_mut().zip(images) {
        dst.assign(img);
    }
    let mut c = Container::new();
    c.put_complex("image", &stack);
    c.put_strings("slice_id", &(0..images.len()).map(slice_id).collect::<Vec<_>>());
    Ok(c)
}

fn load_images(p: &Path) -> Result<Vec<CImage<f32>>> {
    let c = load_container(p)?;
    let stack = c
        .complex::<f32>("image")?
        .into_dimensionality::<Ix3>()
        .map_err(|e| anyhow!("{}: image stack: {e}", p.display()))?;
    Ok(stack.axis_iter(Axis(0)).map(|v| v.to_owned()).collect())
}

pub fn gen_data(run: &mut Run) -> Result<()> {
    let d = run.cfg.data.clone();
    for (k, ((split, name), count)) in SPLITS.into_iter().zip([d.train, d.val, d.test]).enumerate() {
        let mut ds = make_phantom_dataset::<f32>(count, (d.height, d.width), sub_seed(run.cfg.seed, k as u64))?;
        ds.split = split;
        let path = run.path(&data_path(name));
        run.write_container(&path, dataset_to_container(&ds)?)?;
    }
    Ok(())
}

pub fn mask_gen(run: &mut Run) -> Result<()> {
    for (k, (_, name)) in SPLITS.into_iter().enumerate() {
        let ds = load_dataset(run, name)?;
        let samples = simulate_dataset(&ds, run.cfg.data.coils, &run.cfg.mask, sub_seed(run.cfg.seed, 10 + k as u64))?;
        let m = &samples[0].mask;
        let (h, w) = m.shape();
        let px: Vec<u8> = m.mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let png = run.path(&format!("masks/{name}_0.png"));
        run.write_png(&png, (w, h), false, &px)?;
        let path = run.path(&kspace_path(name));
        run.write_container(&path, samples_to_container(&samples)?)?;
    }
    Ok(())
}

pub fn train_ufnet(run: &mut Run) -> Result<()> {
    let ds = load_dataset(run, "train")?;
    let fcfg = run.cfg.featnet.clone();
    let net = FeatNet::<f32>::new(fcfg.network.clone(), run.cfg.seed)?;
    let mut violation = None;
    let out = pretrain_with(&ds, net, &fcfg.train, run.cfg.seed, |e| {
        if violation.is_none() && (e.bank_norm_error > 1e-6 || e.prob_sum_error > 1e-9) {
            violation = Some(format!(
                "epoch {}: bank norm error {:.3e}, probability sum error {:.3e}",
                e.epoch, e.bank_norm_error, e.prob_sum_error
            ));
        }
    })?;
    if let Some(v) = violation {
        bail!("memory-bank invariant violated in {v}");
    }
    let log_path = run.path("logs/ufnet.csv");
    run.write_csv(&log_path, &out.history)?;
    let path = run.path(UFNET);
    run.write_container(&path, featnet_to_container(&out.net, Some(&out.bank), &fcfg.train)?)
}

pub fn train_recon(run: &mut Run, loss: LossKind, mu: Option<f64>) -> Result<()> {
    let train = load_samples(run, "train")?;
    let val = load_samples(run, "val")?;
    let mut ucfg = run.cfg.ufloss.clone();
    let feat = match loss {
        LossKind::L2 => {
            ensure!(mu.is_none_or(|m| m == 0.0), "--mu applies to --loss ufloss only");
            ucfg.mu = 0.0;
            None
        }
        LossKind::Ufloss => {
            if let Some(m) = mu {
                ucfg.mu = m;
            }
            ensure!(ucfg.mu > 0.0, "--loss ufloss needs a positive mu");
            Some(load_ufnet(run)?.net)
        }
    };
    let net = ReconNet::<f32>::new(run.cfg.unet.clone(), run.cfg.unroll.lam_init, run.cfg.seed)?;
    let out = train_modl_with(&train, &val, feat.as_ref(), net, &run.cfg.unroll, &ucfg, run.cfg.seed, |e| {
        log::info!(
            "{} epoch {}: train {:.4e}, val nrmse {:.4}, val ssim {:.4}",
            loss.method(),
            e.epoch,
            e.train_total,
            e.val_nrmse,
            e.val_ssim
        )
    })?;
    log::info!("best epoch {}", out.best_epoch);
    let log_path = run.path(&format!("logs/{}.csv", loss.method()));
    run.write_csv(&log_path, &out.history)?;
    let path = run.path(&format!("checkpoints/{}.npz", loss.method()));
    let c = recon_to_container(&out.net, &run.cfg.unroll, &ucfg);
    run.write_container(&path, c)
}

pub fn recon_pics(run: &mut Run) -> Result<()> {
    let samples = load_samples(run, "test")?;
    let images = samples
        .iter()
        .map(|s| Ok(pics_reconstruct(&s.y, &s.maps, &s.mask, &run.cfg.pics)?.image))
        .collect::<Result<Vec<_>>>()?;
    let path = run.path(&recon_path("pics"));
    run.write_container(&path, images_container(&images)?)
}

pub fn reconstruct(run: &mut Run, checkpoint: &Path, input: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let ckpt = recon_from_container::<f32>(&load_container(checkpoint)?)
        .with_context(|| format!("decoding {}", checkpoint.display()))?;
    let input = input.unwrap_or_else(|| run.path(&kspace_path("test")));
    let samples = load_samples_at(&input)?;
    let images = samples
        .iter()
        .map(|s| {
            let enc = Arc::new(s.encoding()?);
            Ok(modl_forward(&s.y, &enc, &ckpt.net, ckpt.unroll.unrolls, ckpt.unroll.cg_steps)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let output = match output {
        Some(p) => p,
        None => {
            let stem = checkpoint.file_stem().ok_or_else(|| anyhow!("checkpoint path has no file name"))?;
            run.path(&recon_path(&stem.to_string_lossy()))
        }
    };
    run.write_container(&output, images_container(&images)?)
}

/// Reconstructions of the test set by `method`, as written by earlier commands.
fn method_images(run: &Run, method: &str, samples: &[KSpaceSample<f32>]) -> Result<Vec<CImage<f32>>> {
    let images = match method {
        "reference" => samples.iter().map(|s| s.target.image.clone()).collect(),
        "zero-filled" => samples.iter().map(|s| Ok(s.zero_filled()?)).collect::<Result<Vec<_>>>()?,
        m => load_images(&run.require(&recon_path(m))?)?,
    };
    ensure!(
        images.len() == samples.len(),
        "{method}: {} reconstructions for {} test slices",
        images.len(),
        samples.len()
    );
    Ok(images)
}

pub fn evaluate(run: &mut Run, methods: &[String]) -> Result<()> {
    let samples = load_samples(run, "test")?;
    let net = load_ufnet(run)?.net;
    let mut rows = Vec::new();
    for m in methods {
        let images = method_images(run, m, &samples)?;
        for (i, (x, s)) in images.iter().zip(&samples).enumerate() {
            let reference = &s.target.image;
            rows.push(MetricsRow {
                method: m.clone(),
                slice_id: slice_id(i),
                nrmse: nrmse(x, reference)?,
                ssim: ssim(x, reference)?,
                ufloss: ufloss(reference, x, &net, &run.cfg.ufloss, (0, 0))?,
            });
        }
    }
    let path = run.path("metrics/metrics.csv");
    run.write_csv(&path, &rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

pub fn report(run: &mut Run) -> Result<()> {
    let rows: Vec<MetricsRow> = read_csv(&run.require("metrics/metrics.csv")?)?;
    let mut methods: Vec<String> = METHODS.iter().map(|m| m.to_string()).collect();
    for r in &rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut summary = Vec::new();
    for m in &methods {
        let mine: Vec<&MetricsRow> = rows.iter().filter(|r| &r.method == m).collect();
        if mine.is_empty() {
            continue;
        }
        for (metric, get) in
            [("nrmse", (|r: &MetricsRow| r.nrmse) as fn(&MetricsRow) -> f64), ("ssim", |r| r.ssim), ("ufloss", |r| r.ufloss)]
        {
            let s = Summary::of(&mine.iter().map(|r| get(r)).collect::<Vec<_>>())?;
            summary.push(SummaryRow {
                method: m.clone(),
                metric: metric.into(),
                count: s.count,
                median: s.median,
                q1: s.q1,
                q3: s.q3,
                iqr: s.iqr(),
            });
        }
    }
    let mut md = format!("<!-- {} -->\n\n| method | metric | n | median | IQR (q1 to q3) |\n|---|---|---|---|---|\n", run.stamp());
    for s in &summary {
        md.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} ({:.4} to {:.4}) |\n",
            s.method, s.metric, s.count, s.median, s.iqr, s.q1, s.q3
        ));
    }
    let csv_path = run.path("report/summary.csv");
    run.write_csv(&csv_path, &summary)?;
    let md_path = run.path("report/summary.md");
    run.write_text(&md_path, &md)
}

#[derive(Serialize)]
struct CurveRow {
    level: f64,
    ufloss: f64,
    nrmse: f64,
}

fn curve_rows(c: &StudyCurve) -> Vec<CurveRow> {
    (0..c.len()).map(|i| CurveRow { level: c.x_values[i], ufloss: c.ufloss[i], nrmse: c.nrmse[i] }).collect()
}

#[derive(Serialize)]
struct PerturbSummary {
    study: String,
    spearman_ufloss: f64,
    spearman_nrmse: f64,
    min_second_difference: f64,
    range: f64,
}

pub fn study_perturb(run: &mut Run) -> Result<()> {
    let ds = load_dataset(run, "test")?;
    let net = load_ufnet(run)?.net;
    let st = run.cfg.studies.clone();
    let arms = [
        ("perturb-noise", st.noise_levels.clone(), Perturbation::Noise { seeds: st.noise_seeds.clone() }),
        ("perturb-blur", st.blur_factors.clone(), Perturbation::Blur),
    ];
    let mut summary = Vec::new();
    for (study, levels, kind) in arms {
        let mut mean = StudyCurve { x_values: levels.clone(), ufloss: vec![0.0; levels.len()], nrmse: vec![0.0; levels.len()] };
        for i in 0..st.phantoms {
            let c = perturbation_study(&ds.slices[i].image, &levels, &kind, &net, &run.cfg.ufloss)?;
            for j in 0..levels.len() {
                mean.ufloss[j] += c.ufloss[j] / st.phantoms as f64;
                mean.nrmse[j] += c.nrmse[j] / st.phantoms as f64;
            }
            let path = run.path(&format!("studies/{study}_{}.csv", slice_id(i)));
            run.write_csv(&path, &curve_rows(&c))?;
        }
        let path = run.path(&format!("studies/{study}_mean.csv"));
        run.write_csv(&path, &curve_rows(&mean))?;
        let d2 = ufloss::eval::second_differences(&mean.ufloss);
        let (lo, hi) = mean.ufloss.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        summary.push(PerturbSummary {
            study: study.into(),
            spearman_ufloss: spearman(&levels, &mean.ufloss)?,
            spearman_nrmse: spearman(&levels, &mean.nrmse)?,
            min_second_difference: d2.iter().copied().fold(f64::INFINITY, f64::min),
            range: hi - lo,
        });
    }
    let path = run.path("studies/perturb_summary.csv");
    run.write_csv(&path, &summary)
}

#[derive(Serialize)]
struct DeblurSummary {
    slice_id: String,
    alpha: f64,
    ufloss_start: f64,
    ufloss_end: f64,
    nrmse_start: f64,
    nrmse_end: f64,
}

pub fn study_deblur(run: &mut Run) -> Result<()> {
    let ds = load_dataset(run, "test")?;
    let net = load_ufnet(run)?.net;
    let st = run.cfg.studies.clone();
    let ucfg = run.cfg.ufloss.clone();
    let alpha = match st.deblur_alpha {
        Some(a) => a,
        None => {
            let a = line_search_alpha(&ds.slices[0].image, st.deblur_r0, &st.deblur_candidates, st.deblur_probe_steps, &net, &ucfg)?;
            log::info!("descent step size {a}");
            a
        }
    };
    let mut summary = Vec::new();
    for i in 0..st.phantoms {
        let x = &ds.slices[i].image;
        let out = deblur_descent(x, st.deblur_r0, alpha, st.deblur_steps, &net, &ucfg)?;
        let id = slice_id(i);
        let path = run.path(&format!("studies/deblur_{id}.csv"));
        run.write_csv(&path, &curve_rows(&out.curve))?;
        let white = max_magnitude(x);
        let (h, w) = x.dim();
        for (name, img) in [("reference", x.clone()), ("blurred", perturb_blur(x, st.deblur_r0)?), ("deblurred", out.image)] {
            let path = run.path(&format!("studies/deblur_{id}_{name}.png"));
            run.write_png(&path, (w, h), false, &magnitude_gray(&img, white))?;
        }
        let c = &out.curve;
        summary.push(DeblurSummary {
            slice_id: id,
            alpha,
            ufloss_start: c.ufloss[0],
            ufloss_end: *c.ufloss.last().unwrap(),
            nrmse_start: c.nrmse[0],
            nrmse_end: *c.nrmse.last().unwrap(),
        });
    }
    let path = run.path("studies/deblur_summary.csv");
    run.write_csv(&path, &summary)
}

#[derive(Serialize)]
struct RetrievalRow {
    query: String,
    rank: usize,
    instance: usize,
    train_slice: usize,
    row: usize,
    col: usize,
    score: f64,
}

pub fn retrieve(run: &mut Run) -> Result<()> {
    let train = load_dataset(run, "train")?;
    let test = load_dataset(run, "test")?;
    let ckpt = load_ufnet(run)?;
    let bank = ckpt.bank.ok_or_else(|| anyhow!("{UFNET} holds no memory bank"))?;
    let p = ckpt.net.patch_size();
    let instances = sample_instances(&train, ckpt.training.patches_per_slice, p, run.cfg.seed)?;
    ensure!(
        instances.len() == bank.len(),
        "memory bank has {} rows but the training data yields {} patches",
        bank.len(),
        instances.len()
    );
    let st = &run.cfg.studies;
    let (k, nq) = (st.retrieve_k, st.retrieve_queries);
    let mut rows = Vec::new();
    let mut tiles = Vec::new();
    for q in 0..nq {
        let img = &test.slices[q % test.len()].image;
        let (h, w) = img.dim();
        let query = Patch::crop(img, ((h - p) / 2, (w - p) / 2), p, "query").pixels;
        let white = max_magnitude(&query);
        let mut row_tiles = vec![magnitude_gray(&query, white)];
        for (rank, (idx, score)) in retrieve_neighbors(&query, &ckpt.net, &bank, k)?.into_iter().enumerate() {
            let inst = instances[idx];
            let patch = Patch::crop(&train.slices[inst.slice].image, inst.origin, p, "bank").pixels;
            row_tiles.push(magnitude_gray(&patch, max_magnitude(&patch)));
            rows.push(RetrievalRow {
                query: format!("query-{q:03}"),
                rank: rank + 1,
                instance: idx,
                train_slice: inst.slice,
                row: inst.origin.0,
                col: inst.origin.1,
                score,
            });
        }
        tiles.push(row_tiles);
    }
    let path = run.path("studies/retrieve.csv");
    run.write_csv(&path, &rows)?;
    let (dims, px) = montage(&tiles, p, 2);
    let path = run.path("studies/retrieve.png");
    run.write_png(&path, dims, false, &px)
}

#[derive(Serialize)]
struct CorrelationRow {
    row: usize,
    col: usize,
    ufloss_corr: f64,
    ssim_corr: f64,
}

pub fn correlate(run: &mut Run, method: &str) -> Result<()> {
    let samples = load_samples(run, "test")?;
    let net = load_ufnet(run)?.net;
    let images = method_images(run, method, &samples)?;
    let p = net.patch_size();
    let stride = run.cfg.studies.correlate_stride;
    for i in 0..run.cfg.studies.phantoms {
        let reference = &samples[i].target.image;
        let (h, w) = reference.dim();
        let source = Patch::crop(reference, ((h - p) / 2, (w - p) / 2), p, "source").pixels;
        let feat = correlation_map(&source, &images[i], &net, stride)?;
        let sim = ssim_correlation_map(&source, &images[i], stride)?;
        let (gh, gw) = feat.values.dim();
        let rows: Vec<CorrelationRow> = (0..gh * gw)
            .map(|c| {
                let (r, cc) = (c / gw, c % gw);
                CorrelationRow { row: r * stride, col: cc * stride, ufloss_corr: feat.values[[r, cc]], ssim_corr: sim.values[[r, cc]] }
            })
            .collect();
        let id = slice_id(i);
        let path = run.path(&format!("studies/correlate_{id}_{method}.csv"));
        run.write_csv(&path, &rows)?;
        for (name, map) in [("correlate", &feat), ("correlate-ssim", &sim)] {
            let (dims, px) = heatmap(&map.positive_part(), 4);
            let path = run.path(&format!("studies/{name}_{id}_{method}.png"));
            run.write_png(&path, dims, true, &px)?;
        }
    }
    Ok(())
}
