//! Full registration pipeline and the benchmark sweep driver.

use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use oaareg::attention::{
    exact_attention, overlap_confidence, overlap_token_forward, seeded_projection,
    AttentionWeights, FeatureMatrix, OverlapScores,
};
use oaareg::coarse::{knn_expand_prune, overlap_filter, similarity, soft_match};
use oaareg::estimator::{fsr_estimate, ransac_estimate, weighted_svd};
use oaareg::fine::{assign_patches, extract_dense};
use oaareg::geometry::{
    apply_transform, Correspondence, CorrespondenceSet, PointCloud, RigidTransform,
};
use oaareg::metrics::{
    chamfer, inlier_stats, overlap_bce, patch_overlap_truth, patch_stats, registration_errors,
    registration_pass, EvalReport, ReportCounts, ReportThresholds,
};
use oaareg::synth::{generate_pair, overlap_oracle, simulate_descriptors, voxel_downsample};

use crate::config::{EstimatorChoice, OverlapSource, RunConfig};
use crate::io::{load_cloud, write_cloud, PlyFormat};

/// Everything a single registration run produces.
pub struct RunOutcome {
    pub report: EvalReport,
    pub estimated: RigidTransform,
    /// Wall-clock seconds spent in the pose estimator alone.
    pub estimation_seconds: f64,
    pub aligned_source: PointCloud,
    /// The dense correspondences the estimator consumed.
    pub correspondences: CorrespondenceSet,
    pub source: PointCloud,
    pub target: PointCloud,
    pub ground_truth: Option<RigidTransform>,
}

/// Runs the full pipeline once: scene synthesis (or file loading), superpoint
/// sampling, coarse soft matching with overlap gating, dense extraction and
/// pose estimation, then every metric the report carries.
pub fn run_register(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;

    // ---- stage: inputs ----
    let (src, tgt, truth) = match (&cfg.source, &cfg.target) {
        (Some(s), Some(t)) => {
            let src = load_cloud(s).context("stage inputs: loading source")?;
            let tgt = load_cloud(t).context("stage inputs: loading target")?;
            let gt = cfg
                .gt_transform
                .as_ref()
                .map(|v| parse_gt_transform(v))
                .transpose()
                .context("stage inputs: ground-truth transform")?;
            (src, tgt, gt.map(|transform| FileTruth { transform }))
        }
        _ => {
            let spec = cfg.scene_spec();
            let (mut src, mut tgt, truth) =
                generate_pair(&spec).context("stage synthesis: scene generation")?;
            simulate_descriptors(&mut src, &mut tgt, &truth, &spec)
                .context("stage synthesis: descriptors")?;
            (
                src,
                tgt,
                Some(FileTruth {
                    transform: truth.transform,
                }),
            )
        }
    };
    let gt = truth.as_ref().map(|t| t.transform);

    // ---- stage: superpoint sampling ----
    let sp_src = voxel_downsample(&src, cfg.voxel_size).context("stage superpoints: source")?;
    let sp_tgt = voxel_downsample(&tgt, cfg.voxel_size).context("stage superpoints: target")?;

    let sp_src_feats = superpoint_features(&sp_src)?;
    let sp_tgt_feats = superpoint_features(&sp_tgt)?;

    // ---- stage: coarse matching ----
    let match_cfg = cfg.match_config();
    let sim = similarity(&sp_src_feats, &sp_tgt_feats).context("stage coarse: similarity")?;
    let (c0, c1) = soft_match(&sim, &match_cfg).context("stage coarse: soft match")?;

    let (src_space, tgt_space) = match cfg.knn_space {
        oaareg::coarse::KnnSpace::Feature => (
            sp_src_feats.as_matrix().clone(),
            sp_tgt_feats.as_matrix().clone(),
        ),
        oaareg::coarse::KnnSpace::Spatial => {
            (positions_matrix(&sp_src), positions_matrix(&sp_tgt))
        }
    };
    let expanded = knn_expand_prune(&sim, (&c0, &c1), &src_space, &tgt_space, &match_cfg)
        .context("stage coarse: knn expansion")?;

    // ---- stage: overlap gating ----
    let (src_scores, tgt_scores) =
        overlap_scores(cfg, &sp_src, &sp_tgt, gt.as_ref()).context("stage overlap: scores")?;
    let gated = overlap_filter(&expanded, &src_scores, &tgt_scores, &match_cfg)
        .context("stage overlap: filter")?;

    // ---- stage: dense matching ----
    let src_assign = assign_patches(&src, &sp_src).context("stage dense: source patches")?;
    let tgt_assign = assign_patches(&tgt, &sp_tgt).context("stage dense: target patches")?;
    // A superpoint can end up patchless when all its voxel members lie closer
    // to a neighboring centroid; pairs touching one have nothing to match.
    let gated = gated.filtered(|p| {
        !src_assign.patch(p.src).is_empty() && !tgt_assign.patch(p.tgt).is_empty()
    });
    let src_desc = FeatureMatrix::new(
        src.descriptors()
            .ok_or_else(|| anyhow!("stage dense: source cloud has no descriptors"))?
            .clone(),
    )?;
    let tgt_desc = FeatureMatrix::new(
        tgt.descriptors()
            .ok_or_else(|| anyhow!("stage dense: target cloud has no descriptors"))?
            .clone(),
    )?;
    let mut correspondences = extract_dense(
        &gated,
        &src_assign,
        &tgt_assign,
        &src_desc,
        &tgt_desc,
        &cfg.sinkhorn_params(),
    )
    .context("stage dense: extraction")?;

    if let Some(cap) = cfg.max_correspondences {
        correspondences = top_confidence(&correspondences, cap)?;
    }

    // ---- stage: estimation ----
    let est_cfg = cfg.estimator_config();
    let started = Instant::now();
    let estimated = match cfg.estimator {
        EstimatorChoice::Fsr => fsr_estimate(&correspondences, &src, &tgt, &est_cfg)
            .context("stage estimation: fsr")?,
        EstimatorChoice::Ransac => ransac_estimate(&correspondences, &src, &tgt, &est_cfg)
            .context("stage estimation: ransac")?,
        EstimatorChoice::Wsvd => {
            let (ps, qs): (Vec<_>, Vec<_>) = correspondences
                .pairs()
                .iter()
                .map(|c| (*src.point(c.source_index), *tgt.point(c.target_index)))
                .unzip();
            let weights: Vec<f64> = correspondences
                .pairs()
                .iter()
                .map(|c| c.confidence)
                .collect();
            weighted_svd(&ps, &qs, &weights).context("stage estimation: weighted svd")?
        }
    };
    let estimation_seconds = started.elapsed().as_secs_f64();

    // ---- stage: metrics ----
    let aligned_source = apply_transform(&estimated, &src);
    let thresholds = ReportThresholds {
        rr_criterion: cfg.rr_criterion,
        ..ReportThresholds::default()
    };

    let chamfer_value = chamfer(&aligned_source, &tgt).context("stage metrics: chamfer")?;
    let (ir, fmr, rr, rre, rte, rmse, pir, pop, bce);
    match gt.as_ref() {
        Some(gt) => {
            let (ir_v, hit) = inlier_stats(
                &correspondences,
                &src,
                &tgt,
                gt,
                thresholds.inlier_tau_m,
                thresholds.fmr_min_ir,
            )
            .context("stage metrics: inlier stats")?;
            ir = ir_v;
            fmr = if hit { 1.0 } else { 0.0 };
            let (rre_v, rte_v, rmse_v) = registration_errors(&estimated, gt, &src);
            rre = rre_v;
            rte = rte_v;
            rmse = rmse_v;
            rr = if registration_pass(rre, rte, rmse, cfg.rr_criterion, &thresholds) {
                1.0
            } else {
                0.0
            };

            let tau = cfg.effective_overlap_tau();
            let truth =
                patch_overlap_truth(&src, &tgt, &src_assign, &tgt_assign, gt, tau);
            let pred_src: Vec<bool> = src_scores.scores.iter().map(|&s| s > cfg.theta_o).collect();
            let pred_tgt: Vec<bool> = tgt_scores.scores.iter().map(|&s| s > cfg.theta_o).collect();
            let (pir_v, pop_v) = patch_stats(&gated, &pred_src, &pred_tgt, &truth)
                .context("stage metrics: patch stats")?;
            pir = pir_v;
            pop = pop_v;

            let src_bce = overlap_bce(&src_scores.scores, &truth.src_labels)
                .context("stage metrics: overlap bce")?;
            let tgt_bce = overlap_bce(&tgt_scores.scores, &truth.tgt_labels)
                .context("stage metrics: overlap bce")?;
            bce = 0.5 * (src_bce + tgt_bce);
        }
        None => {
            // File inputs without a ground-truth transform: the alignment
            // quality metrics are undefined and serialize as null.
            ir = f64::NAN;
            fmr = f64::NAN;
            rr = f64::NAN;
            rre = f64::NAN;
            rte = f64::NAN;
            rmse = f64::NAN;
            pir = f64::NAN;
            pop = f64::NAN;
            bce = f64::NAN;
        }
    }

    let report = EvalReport {
        ir,
        fmr,
        rr,
        rre_deg: rre,
        rte_m: rte,
        rmse_m: rmse,
        chamfer: chamfer_value,
        pir,
        pop,
        overlap_bce: bce,
        counts: ReportCounts {
            source_points: src.len(),
            target_points: tgt.len(),
            source_superpoints: sp_src.len(),
            target_superpoints: sp_tgt.len(),
            patch_pairs: gated.len(),
            correspondences: correspondences.len(),
        },
        thresholds,
    };

    if let Some(path) = &cfg.report_json {
        std::fs::write(path, report_json_bytes(&report)?)
            .with_context(|| format!("writing report to {}", path.display()))?;
    }
    if let Some(path) = &cfg.aligned_ply {
        write_cloud(path, &aligned_source, PlyFormat::BinaryLittleEndian)
            .with_context(|| format!("writing aligned cloud to {}", path.display()))?;
    }
    if let Some(path) = &cfg.dump_source_ply {
        write_cloud(path, &src, PlyFormat::BinaryLittleEndian)
            .with_context(|| format!("writing source cloud to {}", path.display()))?;
    }
    if let Some(path) = &cfg.dump_target_ply {
        write_cloud(path, &tgt, PlyFormat::BinaryLittleEndian)
            .with_context(|| format!("writing target cloud to {}", path.display()))?;
    }

    Ok(RunOutcome {
        report,
        estimated,
        estimation_seconds,
        aligned_source,
        correspondences,
        source: src,
        target: tgt,
        ground_truth: gt,
    })
}

struct FileTruth {
    transform: RigidTransform,
}

fn parse_gt_transform(values: &[f64]) -> Result<RigidTransform> {
    if values.len() != 12 {
        return Err(anyhow!("expected 12 numbers, got {}", values.len()));
    }
    let rotation = Matrix3::from_row_slice(&values[..9]);
    let translation = Vector3::new(values[9], values[10], values[11]);
    RigidTransform::try_new(rotation, translation).map_err(|e| anyhow!("{e}"))
}

fn superpoint_features(sp: &PointCloud) -> Result<FeatureMatrix> {
    let desc = sp
        .descriptors()
        .ok_or_else(|| anyhow!("superpoints carry no pooled descriptors"))?;
    Ok(FeatureMatrix::new(desc.clone())?)
}

fn positions_matrix(cloud: &PointCloud) -> DMatrix<f64> {
    DMatrix::from_fn(cloud.len(), 3, |r, c| cloud.point(r)[c])
}

/// Superpoint overlap scores from the configured source: ground-truth labels
/// mapped to confident scores, or the token-attention forward pass with
/// seeded weights.
fn overlap_scores(
    cfg: &RunConfig,
    sp_src: &PointCloud,
    sp_tgt: &PointCloud,
    gt: Option<&RigidTransform>,
) -> Result<(OverlapScores, OverlapScores)> {
    match cfg.overlap_source {
        OverlapSource::Oracle => {
            let gt = gt.ok_or_else(|| {
                anyhow!("overlap oracle needs a ground-truth transform (synthetic scenes or gt_transform)")
            })?;
            let tau = cfg.effective_overlap_tau();
            let (src_labels, tgt_labels) = overlap_oracle(sp_src, sp_tgt, gt, tau);
            Ok((labels_to_scores(&src_labels), labels_to_scores(&tgt_labels)))
        }
        OverlapSource::Attention => {
            let d = cfg.attention_dim;
            let weights = AttentionWeights::seeded(d, cfg.rng_seed ^ 0xA77E);
            let out_proj = seeded_projection(d, 1, cfg.rng_seed ^ 0x0A77);
            let out_proj = DVector::from_column_slice(out_proj.as_slice());

            let h_src = projected_features(sp_src, d, cfg.rng_seed ^ 0x9107)?;
            let h_tgt = projected_features(sp_tgt, d, cfg.rng_seed ^ 0x9107)?;

            let token_src = overlap_token_forward(&h_src, &weights)?;
            let token_tgt = overlap_token_forward(&h_tgt, &weights)?;

            // Each side's features are updated by cross attention against the
            // other side's decoded token, then scored with its own token.
            let token_row = |t: &oaareg::attention::OverlapToken| {
                FeatureMatrix::new(DMatrix::from_row_slice(1, d, t.as_vector().as_slice()))
                    .expect("finite token")
            };
            let h_src_o =
                exact_attention(&h_src, &token_row(&token_tgt), &token_row(&token_tgt), &weights)?;
            let h_tgt_o =
                exact_attention(&h_tgt, &token_row(&token_src), &token_row(&token_src), &weights)?;

            let src_scores = overlap_confidence(&h_src_o, &token_src, &out_proj)?;
            let tgt_scores = overlap_confidence(&h_tgt_o, &token_tgt, &out_proj)?;
            Ok((src_scores, tgt_scores))
        }
    }
}

fn labels_to_scores(labels: &[bool]) -> OverlapScores {
    let scores: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
    OverlapScores {
        weight_map: scores.clone(),
        scores,
    }
}

fn projected_features(sp: &PointCloud, dim: usize, seed: u64) -> Result<FeatureMatrix> {
    let desc = sp
        .descriptors()
        .ok_or_else(|| anyhow!("attention overlap path needs descriptors"))?;
    let projection = seeded_projection(desc.ncols(), dim, seed);
    Ok(FeatureMatrix::new(desc * projection)?)
}

/// Keeps the `cap` most confident pairs (ties toward the lowest index pair).
fn top_confidence(c: &CorrespondenceSet, cap: usize) -> Result<CorrespondenceSet> {
    let mut pairs: Vec<Correspondence> = c.pairs().to_vec();
    pairs.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then((a.source_index, a.target_index).cmp(&(b.source_index, b.target_index)))
    });
    pairs.truncate(cap);
    pairs.sort_by_key(|p| (p.source_index, p.target_index));
    Ok(CorrespondenceSet::new(pairs, c.src_len(), c.tgt_len())?)
}

/// Serializes a report as pretty JSON with a trailing newline. Non-finite
/// values (metrics that were not computable) serialize as null.
pub fn report_json_bytes(report: &EvalReport) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

// ---------------------------------------------------------------------------
// benchmark sweeps
// ---------------------------------------------------------------------------

/// One benchmark cell: a parameter combination with aggregated trials.
#[derive(Debug, Clone)]
pub struct BenchmarkCell {
    pub descriptor_noise: f64,
    pub overlap_fraction: f64,
    pub estimator: EstimatorChoice,
    pub trials: usize,
    pub ok_trials: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub time_mean_s: f64,
    pub time_std_s: f64,
}

pub const METRIC_COLUMNS: [&str; 10] = [
    "ir", "fmr", "rr", "rre_deg", "rte_m", "rmse_m", "chamfer", "pir", "pop", "overlap_bce",
];

/// Runs the full sweep grid `{descriptor_noise} x {overlap_fraction} x
/// {estimator}` with `trials` runs per cell (per-trial seeds derived from the
/// root seed), and returns the cells in deterministic grid order. Trial
/// failures are recorded per cell and do not stop the sweep.
pub fn run_benchmark(cfg: &RunConfig) -> Result<(Vec<BenchmarkCell>, String)> {
    cfg.validate()?;
    let noises = axis(&cfg.sweep_descriptor_noise, cfg.descriptor_noise);
    let overlaps = axis(&cfg.sweep_overlap_fraction, cfg.overlap_fraction);
    let estimators = if cfg.sweep_estimator.is_empty() {
        vec![cfg.estimator]
    } else {
        cfg.sweep_estimator.clone()
    };

    let mut cells = Vec::new();
    for &noise in &noises {
        for &overlap in &overlaps {
            for &estimator in &estimators {
                let mut cell_cfg = cfg.clone();
                cell_cfg.descriptor_noise = noise;
                cell_cfg.overlap_fraction = overlap;
                cell_cfg.estimator = estimator;
                cell_cfg.report_json = None;
                cell_cfg.aligned_ply = None;
                cell_cfg.dump_source_ply = None;
                cell_cfg.dump_target_ply = None;
                cells.push(run_cell(&cell_cfg));
            }
        }
    }

    let csv = render_csv(cfg, &cells);
    if let Some(path) = &cfg.csv {
        std::fs::write(path, &csv)
            .with_context(|| format!("writing csv to {}", path.display()))?;
    }
    Ok((cells, csv))
}

fn axis(sweep: &[f64], single: f64) -> Vec<f64> {
    if sweep.is_empty() {
        vec![single]
    } else {
        sweep.to_vec()
    }
}

fn run_cell(cfg: &RunConfig) -> BenchmarkCell {
    use rayon::prelude::*;

    let outcomes: Vec<Option<(EvalReport, f64)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut trial_cfg = cfg.clone();
            trial_cfg.rng_seed = cfg.rng_seed.wrapping_add(trial as u64);
            run_register(&trial_cfg)
                .ok()
                .map(|o| (o.report, o.estimation_seconds))
        })
        .collect();

    let ok: Vec<&(EvalReport, f64)> = outcomes.iter().flatten().collect();
    let metric = |r: &EvalReport, name: &str| -> f64 {
        match name {
            "ir" => r.ir,
            "fmr" => r.fmr,
            "rr" => r.rr,
            "rre_deg" => r.rre_deg,
            "rte_m" => r.rte_m,
            "rmse_m" => r.rmse_m,
            "chamfer" => r.chamfer,
            "pir" => r.pir,
            "pop" => r.pop,
            "overlap_bce" => r.overlap_bce,
            _ => unreachable!("unknown metric column"),
        }
    };

    let mut means = Vec::with_capacity(METRIC_COLUMNS.len());
    let mut stds = Vec::with_capacity(METRIC_COLUMNS.len());
    for name in METRIC_COLUMNS {
        let values: Vec<f64> = ok.iter().map(|(r, _)| metric(r, name)).collect();
        let (m, s) = mean_std(&values);
        means.push(m);
        stds.push(s);
    }
    let times: Vec<f64> = ok.iter().map(|(_, t)| *t).collect();
    let (time_mean_s, time_std_s) = mean_std(&times);

    BenchmarkCell {
        descriptor_noise: cfg.descriptor_noise,
        overlap_fraction: cfg.overlap_fraction,
        estimator: cfg.estimator,
        trials: cfg.trials,
        ok_trials: ok.len(),
        means,
        stds,
        time_mean_s,
        time_std_s,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn render_csv(cfg: &RunConfig, cells: &[BenchmarkCell]) -> String {
    let mut out = String::new();
    out.push_str("descriptor_noise,overlap_fraction,estimator,trials,ok_trials");
    for name in METRIC_COLUMNS {
        out.push_str(&format!(",{name}_mean,{name}_std"));
    }
    if cfg.timing {
        out.push_str(",time_s_mean,time_s_std,speedup_vs_ransac");
    }
    out.push('\n');

    for cell in cells {
        out.push_str(&format!(
            "{},{},{},{},{}",
            cell.descriptor_noise, cell.overlap_fraction, cell.estimator, cell.trials,
            cell.ok_trials
        ));
        for (m, s) in cell.means.iter().zip(&cell.stds) {
            out.push_str(&format!(",{},{}", csv_num(*m), csv_num(*s)));
        }
        if cfg.timing {
            // speedup relative to the ransac row of the same grid point
            let ransac_time = cells
                .iter()
                .find(|c| {
                    c.estimator == EstimatorChoice::Ransac
                        && c.descriptor_noise == cell.descriptor_noise
                        && c.overlap_fraction == cell.overlap_fraction
                })
                .map(|c| c.time_mean_s);
            let speedup = match ransac_time {
                Some(rt) if cell.time_mean_s > 0.0 => csv_num(rt / cell.time_mean_s),
                _ => String::new(),
            };
            out.push_str(&format!(
                ",{},{},{}",
                csv_num(cell.time_mean_s),
                csv_num(cell.time_std_s),
                speedup
            ));
        }
        out.push('\n');
    }
    out
}

fn csv_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}
