//! Fixed-split settings and N-way K-shot episodes with 95% intervals.

use rand::seq::{index, IndexedRandom};
use serde::{Deserialize, Serialize};

use crate::data::{ImageDataset, SplitTag};
use crate::error::{FlatError, Result};
use crate::model::{FlatModel, Head};
use crate::par::Exec;
use crate::seed::{self, tag, Rng};
use crate::tensor::{Scalar, Tensor};
use crate::training::{finetune, FinetuneConfig, Setting};

/// Fraction of rows whose label is among the `k` largest logits. Ties are
/// broken toward the lower class index.
pub fn topk_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    if logits.shape().len() != 2 {
        return Err(FlatError::Dimension(format!("logits must be BxC, got {:?}", logits.shape())));
    }
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    if k == 0 || k > classes {
        return Err(FlatError::config("k", format!("must lie in 1..={classes}, got {k}")));
    }
    if labels.len() != rows {
        return Err(FlatError::Dimension(format!("{} labels for {rows} rows", labels.len())));
    }
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(FlatError::Index(format!("label {label} outside 0..{classes}")));
        }
        let row = logits.row(r);
        let v = row[label];
        // classes that rank ahead of `label`
        let ahead = row.iter().enumerate().filter(|&(c, &x)| x > v || (x == v && c < label)).count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}

/// One few-shot task. Episode labels are `0..n_way`; `classes[e]` is the
/// novel label behind episode label `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub classes: Vec<usize>,
    /// `support[e]` holds `k_shot` dataset indices of episode label `e`.
    pub support: Vec<Vec<usize>>,
    /// `(dataset index, episode label)`.
    pub query: Vec<(usize, usize)>,
}

/// Novel examples from both novel splits form the episode pool.
const EPISODE_POOL: [SplitTag; 2] = [SplitTag::NovelTrain, SplitTag::NovelTest];

/// Samples classes and examples uniformly without replacement.
pub fn sample_episode(dataset: &ImageDataset, n_way: usize, k_shot: usize, n_query: usize, rng: &mut Rng) -> Result<Episode> {
    if n_way < 2 || k_shot == 0 || n_query == 0 {
        return Err(FlatError::config("episodes", format!("need n_way >= 2, k_shot >= 1, n_query >= 1 (got {n_way}, {k_shot}, {n_query})")));
    }
    if dataset.n_novel() < n_way {
        return Err(FlatError::Data(format!("{n_way}-way episodes need {n_way} novel classes, the dataset has {}", dataset.n_novel())));
    }
    let mut classes = index::sample(rng, dataset.n_novel(), n_way).into_vec();
    classes.sort_unstable();
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way * n_query);
    for (e, &j) in classes.iter().enumerate() {
        let pool = dataset.novel_class_indices(j, &EPISODE_POOL);
        if pool.len() < k_shot + n_query {
            return Err(FlatError::Data(format!(
                "novel class `{}` has {} examples, an episode needs {}",
                dataset.class_names()[dataset.n_base() + j],
                pool.len(),
                k_shot + n_query
            )));
        }
        let mut pick: Vec<usize> = pool.choose_multiple(rng, k_shot + n_query).copied().collect();
        let q = pick.split_off(k_shot);
        support.push(pick);
        query.extend(q.into_iter().map(|i| (i, e)));
    }
    Ok(Episode { n_way, k_shot, n_query, classes, support, query })
}

/// Which evaluation produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSetting {
    AllClasses,
    NovelClasses,
    Transfer,
    Episodic,
}

impl From<Setting> for EvalSetting {
    fn from(s: Setting) -> Self {
        match s {
            Setting::AllClasses => EvalSetting::AllClasses,
            Setting::NovelClasses => EvalSetting::NovelClasses,
            Setting::Transfer => EvalSetting::Transfer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_way: Option<usize>,
    pub k_shot: usize,
    pub n_runs: usize,
    pub mean: f64,
    pub ci95: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_run: Vec<f64>,
}

/// `(mean, 1.96 * s / sqrt(n))` with the sample standard deviation `s`.
/// Constant input (including a single run) has an interval of exactly 0.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

impl EvalReport {
    pub fn from_runs(setting: EvalSetting, n_way: Option<usize>, k_shot: usize, per_run: Vec<f64>) -> Self {
        let (mean, ci95) = mean_ci95(&per_run);
        EvalReport { setting, n_way, k_shot, n_runs: per_run.len(), mean, ci95, per_run }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_runs: usize,
    /// Per-episode adaptation. `setting` is ignored: episodes always use a
    /// novel-only head over the episode's classes.
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { n_way: 5, k_shot: 1, n_query: 15, n_runs: 600, finetune: FinetuneConfig::default(), seed: 0 }
    }
}

impl EpisodeConfig {
    fn adaptation(&self, episode: usize) -> FinetuneConfig {
        FinetuneConfig {
            setting: Setting::Transfer,
            k_shot: self.k_shot,
            seed: seed::derive(self.seed, &[tag::EPISODE, tag::FINETUNE, episode as u64]),
            ..self.finetune.clone()
        }
    }
}

/// Lazily filled embeddings of dataset images under a fixed model.
struct FeatureCache {
    rows: Vec<Option<Vec<f32>>>,
    d: usize,
}

impl FeatureCache {
    /// Embeds every index in `needed` once.
    fn build(model: &FlatModel, dataset: &ImageDataset, needed: &[usize], exec: Exec) -> Result<Self> {
        let d = model.feature_dim();
        let mut rows = vec![None; dataset.len()];
        let chunks: Vec<&[usize]> = needed.chunks(32).collect();
        let feats = exec.try_map(chunks.len(), |c| model.embed(dataset.batch(chunks[c])))?;
        for (chunk, f) in chunks.iter().zip(feats) {
            for (r, &i) in chunk.iter().enumerate() {
                rows[i] = Some(f.row(r).to_vec());
            }
        }
        Ok(FeatureCache { rows, d })
    }

    fn stack(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.rows[i].as_ref().expect("cached").iter().copied()).collect();
        Tensor::new(&[indices.len(), self.d], data).expect("consistent width")
    }
}

fn score_query(model: &FlatModel, feats: &Tensor, query: &[(usize, usize)]) -> Result<f64> {
    let logits = model.logits(feats, Head::Novel)?;
    let labels: Vec<usize> = query.iter().map(|&(_, e)| e).collect();
    topk_accuracy(&logits, &labels, 1)
}

/// Top-1 query accuracy of one episode on a private copy of `model`.
pub fn run_episode(model: &FlatModel, dataset: &ImageDataset, episode: &Episode, cfg: &EpisodeConfig, index: usize) -> Result<f64> {
    let mut local = model.clone();
    local.drop_base_head();
    let ft = cfg.adaptation(index);
    finetune(&mut local, dataset, &episode.support, &ft, Exec::Sequential)?;
    let qi: Vec<usize> = episode.query.iter().map(|&(i, _)| i).collect();
    let feats = local.embed(dataset.batch(&qi))?;
    score_query(&local, &feats, &episode.query)
}

/// Samples `cfg.n_runs` episodes and scores each independently. Every
/// episode works on its own copy of `model`; `model` itself is untouched.
///
/// When no adaptation epochs are configured the encoder is fixed, so
/// embeddings are computed once and shared between episodes.
pub fn run_episodes(model: &FlatModel, dataset: &ImageDataset, cfg: &EpisodeConfig, exec: Exec) -> Result<EvalReport> {
    if cfg.n_runs == 0 {
        return Err(FlatError::config("episodes.n_runs", "must be at least 1"));
    }
    cfg.adaptation(0).validate()?;
    let episodes = exec.try_map(cfg.n_runs, |r| {
        let mut rng = seed::stream(cfg.seed, &[tag::EPISODE, r as u64]);
        sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.n_query, &mut rng)
            .map_err(|e| FlatError::Episode { index: r, source: Box::new(e) })
    })?;
    let per_run = if cfg.finetune.epochs == 0 {
        let mut needed: Vec<usize> = episodes
            .iter()
            .flat_map(|e| e.support.iter().flatten().copied().chain(e.query.iter().map(|&(i, _)| i)))
            .collect();
        needed.sort_unstable();
        needed.dedup();
        let cache = FeatureCache::build(model, dataset, &needed, exec)?;
        exec.try_map(episodes.len(), |r| {
            let ep = &episodes[r];
            let run = || -> Result<f64> {
                let mut local = model.clone();
                local.drop_base_head();
                match cfg.finetune.init {
                    crate::training::HeadInit::Imprint => {
                        let feats: Vec<Tensor> = ep.support.iter().map(|ix| cache.stack(ix)).collect();
                        local.imprint(&feats)?;
                    }
                    crate::training::HeadInit::Random => local.init_novel_random(cfg.n_way, cfg.adaptation(r).seed)?,
                }
                let qi: Vec<usize> = ep.query.iter().map(|&(i, _)| i).collect();
                score_query(&local, &cache.stack(&qi), &ep.query)
            };
            run().map_err(|e| FlatError::Episode { index: r, source: Box::new(e) })
        })?
    } else {
        exec.try_map(episodes.len(), |r| {
            run_episode(model, dataset, &episodes[r], cfg, r).map_err(|e| FlatError::Episode { index: r, source: Box::new(e) })
        })?
    };
    Ok(EvalReport::from_runs(EvalSetting::Episodic, Some(cfg.n_way), cfg.k_shot, per_run))
}

/// Top-1 accuracy on the fixed test split of `setting`.
///
/// `all_classes` scores base and novel test images with the joint head,
/// `novel_classes` only novel test images with the joint head, and
/// `transfer` novel test images with a novel-only head.
pub fn evaluate_setting(model: &FlatModel, dataset: &ImageDataset, setting: Setting, k_shot: usize) -> Result<EvalReport> {
    let n_novel = model
        .n_novel()
        .ok_or_else(|| FlatError::State(format!("{setting:?} evaluation needs a novel head; fine-tune first")))?;
    if n_novel != dataset.n_novel() {
        return Err(FlatError::State(format!("novel head has {n_novel} rows, dataset has {} novel classes", dataset.n_novel())));
    }
    let n_base = model.n_base();
    match (setting, n_base) {
        (Setting::Transfer, Some(_)) => {
            return Err(FlatError::State("transfer evaluation expects the base head to be replaced".into()))
        }
        (Setting::AllClasses | Setting::NovelClasses, None) => {
            return Err(FlatError::State(format!("{setting:?} evaluation needs the base head")))
        }
        (_, Some(n)) if n != dataset.n_base() => {
            return Err(FlatError::State(format!("base head has {n} rows, dataset has {} base classes", dataset.n_base())))
        }
        _ => {}
    }
    let mut indices = dataset.indices(SplitTag::NovelTest);
    if setting == Setting::AllClasses {
        indices.extend(dataset.indices(SplitTag::BaseTest));
        indices.sort_unstable();
    }
    let acc = match setting {
        Setting::Transfer => crate::training::accuracy_on(model, dataset, &indices, Head::Novel, |i| dataset.label(i))?,
        _ => crate::training::accuracy_on(model, dataset, &indices, Head::Joint, |i| dataset.class_of(i))?,
    };
    Ok(EvalReport::from_runs(setting.into(), None, k_shot, vec![acc]))
}

/// Mean 1-shot accuracy of a nearest-neighbour classifier on raw pixels
/// over `n_runs` novel episodes, as a difficulty probe for a dataset.
pub fn pixel_nearest_neighbor_accuracy(dataset: &ImageDataset, n_way: usize, n_query: usize, n_runs: usize, seed: u64) -> Result<f64> {
    let accs = Exec::default().try_map(n_runs, |r| -> Result<f64> {
        let mut rng = seed::stream(seed, &[tag::EPISODE, tag::DATA, r as u64]);
        let ep = sample_episode(dataset, n_way, 1, n_query, &mut rng)?;
        let mut hits = 0usize;
        for &(q, label) in &ep.query {
            let dist = |s: usize| -> f64 {
                dataset.image(q).iter().zip(dataset.image(s)).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
            };
            let best = (0..n_way).min_by(|&a, &b| dist(ep.support[a][0]).total_cmp(&dist(ep.support[b][0]))).expect("n_way >= 2");
            hits += usize::from(best == label);
        }
        Ok(hits as f64 / ep.query.len() as f64)
    })?;
    Ok(accs.iter().sum::<f64>() / n_runs.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticShapesConfig};
    use crate::model::{EncoderConfig, ModelConfig};
    use crate::training::HeadInit;

    fn t(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::new(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn topk_examples() {
        let l = t(1, 3, &[3.0, 1.0, 2.0]);
        assert_eq!(topk_accuracy(&l, &[2], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&l, &[2], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&l, &[1], 3).unwrap(), 1.0);
        assert!(matches!(topk_accuracy(&l, &[0], 4), Err(FlatError::Config { .. })));
        let perfect = t(2, 2, &[5.0, 0.0, 0.0, 5.0]);
        assert_eq!(topk_accuracy(&perfect, &[0, 1], 1).unwrap(), 1.0);
    }

    #[test]
    fn topk_ties_go_to_lower_index() {
        let l = t(1, 3, &[1.0, 1.0, 1.0]);
        assert_eq!(topk_accuracy(&l, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&l, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&l, &[1], 2).unwrap(), 1.0);
    }

    #[test]
    fn ci_closed_form() {
        let (m, ci) = mean_ci95(&[0.4, 0.6]);
        assert!((m - 0.5).abs() < 1e-12);
        let expect = 1.96 * (0.02f64).sqrt() / 2f64.sqrt();
        assert!((ci - expect).abs() < 1e-12);
        assert!((ci - 0.196).abs() < 1e-3);
        assert_eq!(mean_ci95(&[0.7; 10]), (0.7, 0.0));
    }

    fn data() -> ImageDataset {
        generate_synthetic(&SyntheticShapesConfig {
            n_base_classes: 2,
            n_novel_classes: 5,
            examples_per_class: 20,
            image_size: 8,
            channels: 1,
            k_shot_max: 5,
            n_query: 15,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn episode_shape_and_disjointness() {
        let d = data();
        let mut rng = seed::stream(0, &[]);
        for _ in 0..1000 {
            let ep = sample_episode(&d, 5, 1, 15, &mut rng).unwrap();
            assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 5);
            assert_eq!(ep.query.len(), 75);
            let s: std::collections::HashSet<usize> = ep.support.iter().flatten().copied().collect();
            assert!(ep.query.iter().all(|(i, _)| !s.contains(i)));
            assert!(ep.query.iter().all(|&(i, e)| d.label(i) == ep.classes[e] && !d.split_of(i).is_base()));
        }
        let a = sample_episode(&d, 5, 5, 15, &mut seed::stream(9, &[])).unwrap();
        let b = sample_episode(&d, 5, 5, 15, &mut seed::stream(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deficient_class_is_named() {
        let d = data();
        let err = sample_episode(&d, 5, 10, 15, &mut seed::stream(0, &[])).unwrap_err();
        assert!(matches!(&err, FlatError::Data(m) if m.contains("has 20 examples")), "{err}");
        assert!(sample_episode(&d, 6, 1, 1, &mut seed::stream(0, &[])).is_err());
    }

    fn model() -> FlatModel {
        let cfg = ModelConfig { encoder: EncoderConfig::uniform(1, 8, 2, 8), ..Default::default() };
        FlatModel::new(cfg, 2, 0).unwrap()
    }

    #[test]
    fn episodes_leave_model_untouched_and_cache_matches_direct_path() {
        let d = data();
        let m = model();
        let before = m.clone();
        let cfg = EpisodeConfig {
            n_runs: 6,
            finetune: FinetuneConfig { epochs: 0, ..Default::default() },
            ..Default::default()
        };
        let fast = run_episodes(&m, &d, &cfg, Exec::Parallel).unwrap();
        assert_eq!(m, before);
        let seq = run_episodes(&m, &d, &cfg, Exec::Sequential).unwrap();
        assert_eq!(fast, seq);
        // the uncached path with no epochs is the same computation
        for r in 0..cfg.n_runs {
            let ep = sample_episode(&d, 5, 1, 15, &mut seed::stream(cfg.seed, &[tag::EPISODE, r as u64])).unwrap();
            assert_eq!(run_episode(&m, &d, &ep, &cfg, r).unwrap(), fast.per_run[r]);
        }
        assert_eq!(fast.n_runs, 6);
        assert_eq!(fast.n_way, Some(5));
    }

    #[test]
    fn episodes_with_finetuning_are_deterministic() {
        let d = data();
        let m = model();
        let cfg = EpisodeConfig {
            n_runs: 3,
            finetune: FinetuneConfig { epochs: 1, batch_size: 4, ..Default::default() },
            ..Default::default()
        };
        let a = run_episodes(&m, &d, &cfg, Exec::Parallel).unwrap();
        let b = run_episodes(&m, &d, &cfg, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, model());
    }

    #[test]
    fn episode_error_reports_index() {
        let d = data();
        let cfg = EpisodeConfig { k_shot: 10, n_runs: 2, ..Default::default() };
        let err = run_episodes(&model(), &d, &cfg, Exec::Sequential).unwrap_err();
        assert!(matches!(err, FlatError::Episode { index: 0, .. }), "{err}");
    }

    #[test]
    fn oracle_prototypes_give_perfect_transfer_accuracy() {
        let d = generate_synthetic(&SyntheticShapesConfig {
            n_base_classes: 2,
            n_novel_classes: 3,
            examples_per_class: 5,
            image_size: 8,
            channels: 1,
            test_fraction: 0.2,
            k_shot_max: 1,
            n_query: 1,
            ..Default::default()
        })
        .unwrap();
        let mut m = model();
        m.drop_base_head();
        // one test image per novel class; its own feature is the prototype
        let test = d.indices(SplitTag::NovelTest);
        assert_eq!(test.len(), 3);
        let feats: Vec<Tensor> = test.iter().map(|&i| m.embed(d.batch(&[i])).unwrap()).collect();
        m.imprint(&feats).unwrap();
        let r = evaluate_setting(&m, &d, Setting::Transfer, 1).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.ci95, 0.0);
        assert!(matches!(evaluate_setting(&m, &d, Setting::AllClasses, 1), Err(FlatError::State(_))));
    }

    #[test]
    fn random_head_is_near_chance() {
        let d = data();
        let m = model();
        let accs: Vec<f64> = (0..20)
            .map(|s| {
                let cfg = EpisodeConfig {
                    n_runs: 10,
                    seed: s,
                    finetune: FinetuneConfig { epochs: 0, init: HeadInit::Random, ..Default::default() },
                    ..Default::default()
                };
                run_episodes(&m, &d, &cfg, Exec::default()).unwrap().mean
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.2).abs() < 0.06, "{mean}");
    }

    #[test]
    fn report_json_shape() {
        let r = EvalReport::from_runs(EvalSetting::Episodic, Some(5), 1, vec![0.5, 0.7]);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["setting", "n_way", "k_shot", "n_runs", "mean", "ci95", "per_run"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["setting"], "episodic");
    }

    #[test]
    fn pixel_oracle_on_default_dataset_is_informative_but_not_trivial() {
        let d = generate_synthetic(&SyntheticShapesConfig::default()).unwrap();
        let acc = pixel_nearest_neighbor_accuracy(&d, d.n_novel().min(5), 15, 200, 0).unwrap();
        let chance = 1.0 / d.n_novel().min(5) as f64;
        assert!(acc > chance + 0.05 && acc < 0.9, "{acc}");
    }
}
