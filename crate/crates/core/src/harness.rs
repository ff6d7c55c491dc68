//! Experiment protocol: partial-target generation, metrics, batched attack
//! execution, λ sweeps and per-location success statistics.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Duration;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineTrace;
use crate::baselines::{
    logit_margin_attack, logits_attack, untargeted_attack, BaselineConfig, BaselineMethod,
    UntargetedOutcome,
};
use crate::error::{Error, Result};
use crate::gem::{gem_attack, GemConfig, GemTrace};
use crate::inference::{greedy_decode, PartialCaption};
use crate::lssvm::{lssvm_attack, LssvmConfig, LssvmTrace};
use crate::model::{
    write_pgm, AdversarialState, Caption, Model, Sample, Track, Unrolled, Vocab, EOS,
};
use crate::numerics::{seeded_rng, Tensor};

/// Last 1-based location eligible for observed-word selection.
pub const LAST_OBSERVED_LOCATION: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub succ_sign: u8,
    pub precision: f64,
    pub recall: f64,
    pub eps_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceRecord {
    Gem(GemTrace),
    Lssvm(LssvmTrace),
    Baseline(BaselineTrace),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub noise: Tensor,
    pub predicted: Caption,
    pub metrics: AttackMetrics,
    pub trace: Vec<TraceRecord>,
    pub wall_time: Duration,
}

impl AttackOutcome {
    pub fn new(
        noise: Tensor,
        predicted: Caption,
        metrics: AttackMetrics,
        trace: Vec<TraceRecord>,
        wall_time: Duration,
    ) -> Self {
        Self {
            noise,
            predicted,
            metrics,
            trace,
            wall_time,
        }
    }

    pub fn success(&self) -> bool {
        self.metrics.succ_sign == 1
    }

    /// The trace as JSON lines.
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Compares `predicted` with the observed tokens of `partial` at the
/// locations the prediction covers.
pub fn compute_metrics(
    partial: &PartialCaption,
    predicted: &Caption,
    noise: &Tensor,
) -> AttackMetrics {
    let pred = predicted.tokens();
    let observed: Vec<(usize, usize)> = partial.observed().collect();
    let covered: Vec<&(usize, usize)> = observed.iter().filter(|(p, _)| *p < pred.len()).collect();
    let matches = covered.iter().filter(|(p, t)| pred[*p] == *t).count();
    let precision = if covered.is_empty() {
        0.0
    } else {
        matches as f64 / covered.len() as f64
    };
    let recall = if observed.is_empty() {
        0.0
    } else {
        matches as f64 / observed.len() as f64
    };
    let succ_sign = u8::from(!observed.is_empty() && matches == observed.len());
    AttackMetrics {
        succ_sign,
        precision,
        recall,
        eps_norm: noise.norm_l2(),
    }
}

/// Greedy decode of the perturbed image and its metrics against `partial`.
pub fn evaluate_state(
    model: &Model,
    partial: &PartialCaption,
    state: &AdversarialState,
) -> Result<(Caption, AttackMetrics)> {
    let mut unrolled = Unrolled::new(model, &state.perturbed(), Track::Nothing)?;
    let predicted = greedy_decode(&mut unrolled, model.config.max_len)?;
    let metrics = compute_metrics(partial, &predicted, state.noise());
    Ok((predicted, metrics))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum TargetMode {
    /// Every position observed.
    Complete,
    /// All positions observed except `k` latent ones.
    NLatent(usize),
    /// `k` observed positions, everything else latent.
    NObserved(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub mode: TargetMode,
    /// Keep the terminal EOS of the source as an observed position.
    pub pin_eos: bool,
}

impl TargetSpec {
    pub fn complete() -> Self {
        Self {
            mode: TargetMode::Complete,
            pin_eos: true,
        }
    }

    pub fn n_latent(k: usize) -> Self {
        Self {
            mode: TargetMode::NLatent(k),
            pin_eos: false,
        }
    }

    pub fn n_observed(k: usize) -> Self {
        Self {
            mode: TargetMode::NObserved(k),
            pin_eos: false,
        }
    }
}

/// Builds a partial caption from `source` under the selection protocol.
///
/// Position 1 holding `article` is always observed; in `NObserved` mode the
/// `k` observed positions come from locations `2..=min(7, N)`.
pub fn make_partial_targets(
    source: &Caption,
    spec: TargetSpec,
    seed: u64,
    article: Option<usize>,
) -> Result<PartialCaption> {
    let mut tokens = source.tokens().to_vec();
    if spec.mode != TargetMode::Complete && !spec.pin_eos && tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    let n = tokens.len();
    let starts_with_article = article.is_some() && tokens.first().copied() == article;
    let mut rng = seeded_rng(seed);
    let observed: Vec<usize> = match spec.mode {
        TargetMode::Complete => (0..n).collect(),
        TargetMode::NLatent(k) => {
            let first = usize::from(starts_with_article);
            if n < k + 1 || n - first < k {
                return Err(Error::Input(format!(
                    "caption of length {n} too short for {k} latent words"
                )));
            }
            let latent: Vec<usize> = sample(&mut rng, n - first, k)
                .into_iter()
                .map(|i| i + first)
                .collect();
            (0..n).filter(|p| !latent.contains(p)).collect()
        }
        TargetMode::NObserved(k) => {
            let end = n.min(LAST_OBSERVED_LOCATION);
            if n < k + 1 || end < 1 + k {
                return Err(Error::Input(format!(
                    "caption of length {n} too short for {k} observed words"
                )));
            }
            let mut picked: Vec<usize> = sample(&mut rng, end - 1, k)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            if starts_with_article {
                picked.push(0);
            }
            picked.sort_unstable();
            picked
        }
    };
    let pairs: Vec<(usize, usize)> = observed.iter().map(|&p| (p, tokens[p])).collect();
    PartialCaption::new(n, &pairs)
}

/// One attack job: an image index and the partial caption to force.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackTarget {
    pub image: usize,
    /// Index of the sample whose caption supplied the target.
    pub source: usize,
    pub partial: PartialCaption,
    /// 1-based location of the single chosen observed word, when there is one.
    pub location: Option<usize>,
}

/// One target per image in `0..count`, each drawn from the caption of a
/// different sample with a different caption.
pub fn make_experiment_targets(
    samples: &[Sample],
    count: usize,
    spec: TargetSpec,
    seed: u64,
    vocab: &Vocab,
) -> Result<Vec<AttackTarget>> {
    if count > samples.len() {
        return Err(Error::Input(format!(
            "{count} targets requested from {} samples",
            samples.len()
        )));
    }
    let article = vocab.id("a");
    let mut rng = seeded_rng(seed);
    let mut targets = Vec::with_capacity(count);
    for image in 0..count {
        let candidates: Vec<usize> = (0..samples.len())
            .filter(|&j| j != image && samples[j].caption != samples[image].caption)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Input("no sample with a different caption".into()));
        }
        let source = candidates[rng.gen_range(0..candidates.len())];
        let partial = make_partial_targets(&samples[source].caption, spec, rng.gen(), article)?;
        let location = match spec.mode {
            TargetMode::NObserved(1) => partial
                .observed_positions()
                .into_iter()
                .filter(|&p| !(p == 0 && article.is_some() && partial.slot(0) == article))
                .map(|p| p + 1)
                .next(),
            _ => None,
        };
        targets.push(AttackTarget {
            image,
            source,
            partial,
            location,
        });
    }
    Ok(targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Gem,
    Lssvm,
    MaxLogits,
    LogitMargin,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Gem => "gem",
            AttackMethod::Lssvm => "lssvm",
            AttackMethod::MaxLogits => "max-logits",
            AttackMethod::LogitMargin => "logit-margin",
        }
    }
}

/// Settings for every attack family; the method picks which block applies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub gem: GemConfig,
    pub lssvm: LssvmConfig,
    pub baseline: BaselineConfig,
}

impl AttackConfig {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.gem.lambda = lambda;
        self.lssvm.lambda = lambda;
        self.baseline.lambda = lambda;
        self
    }

    pub fn lambda(&self, method: AttackMethod) -> f64 {
        match method {
            AttackMethod::Gem => self.gem.lambda,
            AttackMethod::Lssvm => self.lssvm.lambda,
            AttackMethod::MaxLogits | AttackMethod::LogitMargin => self.baseline.lambda,
        }
    }
}

fn complete_target(partial: &PartialCaption) -> Result<Caption> {
    if partial.has_latents() {
        return Err(Error::Input(
            "logit baselines need a complete target caption".into(),
        ));
    }
    Ok(Caption(partial.observed_tokens()))
}

pub fn run_attack(
    model: &Model,
    image: &Tensor,
    partial: &PartialCaption,
    method: AttackMethod,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    match method {
        AttackMethod::Gem => gem_attack(model, image, partial, &config.gem),
        AttackMethod::Lssvm => lssvm_attack(model, image, partial, &config.lssvm),
        AttackMethod::MaxLogits => {
            let target = complete_target(partial)?;
            let cfg = BaselineConfig {
                method: BaselineMethod::MaxLogits,
                ..config.baseline.clone()
            };
            logits_attack(model, image, &target, &cfg)
        }
        AttackMethod::LogitMargin => {
            let target = complete_target(partial)?;
            let cfg = BaselineConfig {
                method: BaselineMethod::LogitMargin,
                ..config.baseline.clone()
            };
            logit_margin_attack(model, image, &target, &cfg)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub sr: f64,
    pub precision: f64,
    pub recall: f64,
    pub eps_norm: f64,
    pub count: usize,
    pub failures: usize,
}

impl Aggregates {
    pub fn from_metrics<'a, I: IntoIterator<Item = &'a AttackMetrics>>(
        metrics: I,
        failures: usize,
    ) -> Self {
        let mut agg = Aggregates {
            failures,
            ..Aggregates::default()
        };
        for m in metrics {
            agg.count += 1;
            agg.sr += f64::from(m.succ_sign);
            agg.precision += m.precision;
            agg.recall += m.recall;
            agg.eps_norm += m.eps_norm;
        }
        if agg.count > 0 {
            let n = agg.count as f64;
            agg.sr /= n;
            agg.precision /= n;
            agg.recall /= n;
            agg.eps_norm /= n;
        }
        agg
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub target: AttackTarget,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<AttackOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: AttackMethod,
    pub config: AttackConfig,
    pub seed: u64,
    pub aggregates: Aggregates,
    pub outcomes: Vec<OutcomeRecord>,
}

impl ExperimentReport {
    pub fn recompute_aggregates(&self) -> Aggregates {
        let metrics: Vec<&AttackMetrics> = self
            .outcomes
            .iter()
            .filter_map(|o| o.outcome.as_ref().map(|a| &a.metrics))
            .collect();
        let failures = self.outcomes.iter().filter(|o| o.outcome.is_none()).count();
        Aggregates::from_metrics(metrics, failures)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        serde_json::to_writer_pretty(BufWriter::new(fs::File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(fs::File::open(path)?)?)
    }
}

/// Runs `f` either inline or on a pool of `jobs` threads; results keep input order.
fn run_parallel<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

/// Attacks every target; individual failures are recorded, not raised.
pub fn run_experiment(
    model: &Model,
    images: &[Tensor],
    targets: &[AttackTarget],
    method: AttackMethod,
    config: &AttackConfig,
    seed: u64,
    jobs: usize,
) -> Result<ExperimentReport> {
    let results = run_parallel(targets, jobs, |target| {
        images
            .get(target.image)
            .ok_or_else(|| {
                Error::Input(format!("target references missing image {}", target.image))
            })
            .and_then(|image| run_attack(model, image, &target.partial, method, config))
    })?;
    let outcomes: Vec<OutcomeRecord> = targets
        .iter()
        .zip(results)
        .map(|(target, r)| match r {
            Ok(outcome) => OutcomeRecord {
                target: target.clone(),
                outcome: Some(outcome),
                error: None,
            },
            Err(e) => OutcomeRecord {
                target: target.clone(),
                outcome: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut report = ExperimentReport {
        method,
        config: config.clone(),
        seed,
        aggregates: Aggregates::default(),
        outcomes,
    };
    report.aggregates = report.recompute_aggregates();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub sr: f64,
    pub eps_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub curve: Vec<SweepPoint>,
    pub reports: Vec<ExperimentReport>,
}

#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    model: &Model,
    images: &[Tensor],
    targets: &[AttackTarget],
    method: AttackMethod,
    config: &AttackConfig,
    grid: &[f64],
    seed: u64,
    jobs: usize,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Input("lambda grid is empty".into()));
    }
    let mut reports = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = config.clone().with_lambda(lambda);
        reports.push(run_experiment(
            model, images, targets, method, &cfg, seed, jobs,
        )?);
    }
    let curve = grid
        .iter()
        .zip(&reports)
        .map(|(&lambda, r)| SweepPoint {
            lambda,
            sr: r.aggregates.sr,
            eps_norm: r.aggregates.eps_norm,
        })
        .collect();
    Ok(SweepReport { curve, reports })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationSr {
    pub count: usize,
    pub successes: usize,
    pub sr: f64,
}

/// Success rate keyed by 1-based location; locations without samples are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocationStats {
    pub locations: BTreeMap<usize, LocationSr>,
}

impl LocationStats {
    pub fn total(&self) -> usize {
        self.locations.values().map(|l| l.count).sum()
    }

    /// Kendall τ-b between location index and success rate.
    pub fn kendall_tau(&self) -> f64 {
        let xs: Vec<f64> = self.locations.keys().map(|&k| k as f64).collect();
        let ys: Vec<f64> = self.locations.values().map(|l| l.sr).collect();
        kendall_tau(&xs, &ys)
    }
}

pub fn location_sr_stats(report: &ExperimentReport) -> LocationStats {
    let mut stats = LocationStats::default();
    for rec in &report.outcomes {
        let (Some(loc), Some(outcome)) = (rec.target.location, rec.outcome.as_ref()) else {
            continue;
        };
        let entry = stats.locations.entry(loc).or_insert(LocationSr {
            count: 0,
            successes: 0,
            sr: 0.0,
        });
        entry.count += 1;
        entry.successes += usize::from(outcome.success());
    }
    for l in stats.locations.values_mut() {
        l.sr = l.successes as f64 / l.count as f64;
    }
    stats
}

/// Kendall τ-b; 0 when either side is constant or fewer than two points.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    let (mut concordant, mut discordant) = (0.0f64, 0.0f64);
    let (mut tie_x, mut tie_y) = (0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i].total_cmp(&xs[j]) as i8;
            let dy = ys[i].total_cmp(&ys[j]) as i8;
            match (dx == 0, dy == 0) {
                (true, true) => {}
                (true, false) => tie_x += 1.0,
                (false, true) => tie_y += 1.0,
                (false, false) => {
                    if dx == dy {
                        concordant += 1.0
                    } else {
                        discordant += 1.0
                    }
                }
            }
        }
    }
    let denom = ((concordant + discordant + tie_x) * (concordant + discordant + tie_y)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (concordant - discordant) / denom
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UntargetedAggregates {
    pub change_rate: f64,
    pub eps_norm: f64,
    pub logprob_drop: f64,
    pub count: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UntargetedReport {
    pub config: BaselineConfig,
    pub seed: u64,
    pub aggregates: UntargetedAggregates,
    pub outcomes: Vec<std::result::Result<UntargetedOutcome, String>>,
}

pub fn run_untargeted(
    model: &Model,
    images: &[Tensor],
    config: &BaselineConfig,
    seed: u64,
    jobs: usize,
) -> Result<UntargetedReport> {
    let outcomes: Vec<std::result::Result<UntargetedOutcome, String>> =
        run_parallel(images, jobs, |image| {
            untargeted_attack(model, image, config).map_err(|e| e.to_string())
        })?;
    let ok: Vec<&UntargetedOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let mut agg = UntargetedAggregates {
        count: ok.len(),
        failures: outcomes.len() - ok.len(),
        ..UntargetedAggregates::default()
    };
    if !ok.is_empty() {
        let n = ok.len() as f64;
        agg.change_rate = ok.iter().filter(|o| o.changed).count() as f64 / n;
        agg.eps_norm = ok.iter().map(|o| o.eps_norm).sum::<f64>() / n;
        agg.logprob_drop = ok.iter().map(|o| o.logprob_drop()).sum::<f64>() / n;
    }
    Ok(UntargetedReport {
        config: BaselineConfig {
            method: BaselineMethod::Untargeted,
            ..config.clone()
        },
        seed,
        aggregates: agg,
        outcomes,
    })
}

#[derive(Serialize)]
struct AdversarialSidecar<'a> {
    eps_norm: f64,
    predicted: String,
    predicted_tokens: &'a [usize],
    target: &'a PartialCaption,
    metrics: &'a AttackMetrics,
}

/// Writes `<stem>.pgm` (the perturbed image) and `<stem>.json`.
pub fn save_adversarial(
    dir: &Path,
    stem: &str,
    base: &Tensor,
    outcome: &AttackOutcome,
    partial: &PartialCaption,
    vocab: &Vocab,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let perturbed = base.add(&outcome.noise)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(format!("{stem}.pgm")))?);
    write_pgm(&mut w, &perturbed)?;
    let sidecar = AdversarialSidecar {
        eps_norm: outcome.metrics.eps_norm,
        predicted: vocab.decode(outcome.predicted.tokens()),
        predicted_tokens: outcome.predicted.tokens(),
        target: partial,
        metrics: &outcome.metrics,
    };
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caption(tokens: &[usize]) -> Caption {
        Caption(tokens.to_vec())
    }

    #[test]
    fn metric_examples() {
        let noise = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let full = PartialCaption::complete(&[2, 3, 1]).unwrap();
        let m = compute_metrics(&full, &caption(&[2, 3, 1]), &noise);
        assert_eq!(
            (m.succ_sign, m.precision, m.recall, m.eps_norm),
            (1, 1.0, 1.0, 5.0)
        );

        let partial = PartialCaption::new(6, &[(1, 7), (3, 9)]).unwrap();
        let m = compute_metrics(&partial, &caption(&[2, 7, 1]), &noise);
        assert_eq!((m.succ_sign, m.precision, m.recall), (0, 1.0, 0.5));

        let m = compute_metrics(&partial, &caption(&[1]), &noise);
        assert_eq!((m.succ_sign, m.precision, m.recall), (0, 0.0, 0.0));
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), 0.0);
        // one tie in y: C=2, D=0, pairs untied in x = 3, untied in y = 2
        let t = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]);
        assert!((t - 2.0 / 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn observed_selection_protocol() {
        let vocab = Vocab::synthetic();
        let source = vocab.encode("a bright square on the left", true).unwrap();
        let a = vocab.id("a");
        for seed in 0..50 {
            let p = make_partial_targets(&source, TargetSpec::n_observed(1), seed, a).unwrap();
            let obs = p.observed_positions();
            assert_eq!(obs.len(), 2);
            assert_eq!(obs[0], 0);
            assert!((1..6).contains(&obs[1]));
            assert_eq!(p.slot(0), a);
        }
        let pinned = TargetSpec {
            pin_eos: true,
            ..TargetSpec::n_observed(1)
        };
        let p = make_partial_targets(&source, pinned, 3, a).unwrap();
        assert_eq!(p.len(), 7);
    }

    #[test]
    fn latent_selection_skips_article() {
        let vocab = Vocab::synthetic();
        let source = vocab.encode("a dark bar on the right", true).unwrap();
        for seed in 0..50 {
            let p = make_partial_targets(&source, TargetSpec::n_latent(3), seed, vocab.id("a"))
                .unwrap();
            assert_eq!(p.latent_positions().len(), 3);
            assert!(p.is_observed(0));
        }
        let c = make_partial_targets(&source, TargetSpec::complete(), 0, vocab.id("a")).unwrap();
        assert_eq!(c.len(), 7);
        assert!(!c.has_latents());
        assert!(make_partial_targets(&caption(&[2]), TargetSpec::n_latent(1), 0, None).is_err());
    }

    #[test]
    fn selection_is_deterministic() {
        let vocab = Vocab::synthetic();
        let source = vocab.encode("a dark bar on the right", true).unwrap();
        let a = make_partial_targets(&source, TargetSpec::n_latent(2), 9, vocab.id("a")).unwrap();
        let b = make_partial_targets(&source, TargetSpec::n_latent(2), 9, vocab.id("a")).unwrap();
        assert_eq!(a, b);
    }
}
