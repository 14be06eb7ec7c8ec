//! Two-stage pre-training: masked-reconstruction training of the motif
//! distance, then relative contrastive training of the encoder against the
//! frozen distance.
//!
//! Both stages write an atomic checkpoint after every epoch (model plus
//! optimiser state) and a loss CSV, and can resume from the last checkpoint.
//! Parameters and optimiser moments are rounded to f32 at each epoch end, so
//! a resumed run continues bit-for-bit.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::Dataset;
use crate::distance::{eval_masked_loss, DistanceConfig, DistanceModel, DistanceTrainConfig, DistanceTrainer, WindowFeatures};
use crate::encoder::{EncoderConfig, EncoderModel, Pool};
use crate::error::{invalid, Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Adam, AdamConfig};
use crate::relcon::{relcon_loss_grad, sample_candidates, LossConfig, SubjectIndex};
use crate::signal::{window_subject, znorm_subject, PpgWindow, StatsSource};
use crate::util::{par_map, rng_for, shuffle};

pub const STAGE1_LAST: &str = "stage1_last.ckpt";
pub const STAGE1_BEST: &str = "stage1_best.ckpt";
pub const STAGE1_CSV: &str = "stage1_loss.csv";
pub const STAGE2_LAST: &str = "stage2_last.ckpt";
pub const STAGE2_BEST: &str = "stage2_best.ckpt";
pub const STAGE2_CSV: &str = "stage2_loss.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub stride: usize,
    pub kernel: usize,
    pub filters: usize,
    pub blocks: usize,
    pub groups: usize,
    pub mask_s: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch_size: 16, stride: 10, kernel: 15, filters: 64, blocks: 5, groups: 8, mask_s: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub base_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub n_blocks: usize,
    pub increase_every: usize,
    pub downsample_every: usize,
    pub pool: Pool,
    pub temperature: f64,
    pub similarity: crate::relcon::Similarity,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let loss = LossConfig::default();
        Self {
            epochs: 6,
            lr: 1e-4,
            batch_size: 64,
            base_filters: enc.base_filters,
            kernel: enc.kernel,
            stride: enc.stride,
            n_blocks: enc.n_blocks,
            increase_every: enc.increase_every,
            downsample_every: enc.downsample_every,
            pool: enc.pool,
            temperature: loss.temperature,
            similarity: loss.similarity,
            patience: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub window_s: f64,
    pub rate_hz: f64,
    pub znorm: bool,
    pub seed: u64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { window_s: 240.0, rate_hz: 50.0, znorm: true, seed: 0, stage1: Stage1Config::default(), stage2: Stage2Config::default() }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.rate_hz > 0.0) {
            return Err(invalid("window_s and rate_hz must be positive"));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        self.distance_train_config().model.validate()?;
        self.encoder_config().validate()?;
        self.loss_config().validate()
    }

    pub fn distance_train_config(&self) -> DistanceTrainConfig {
        let s = &self.stage1;
        DistanceTrainConfig {
            model: DistanceConfig {
                kernel: s.kernel,
                filters: s.filters,
                blocks: s.blocks,
                groups: s.groups,
                stride: s.stride,
                rate_hz: self.rate_hz,
                ..DistanceConfig::default()
            },
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            mask_s: s.mask_s,
            seed: self.seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let s = &self.stage2;
        EncoderConfig {
            base_filters: s.base_filters,
            kernel: s.kernel,
            stride: s.stride,
            n_blocks: s.n_blocks,
            increase_every: s.increase_every,
            downsample_every: s.downsample_every,
            pool: s.pool,
            ..EncoderConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { temperature: self.stage2.temperature, similarity: self.stage2.similarity }
    }
}

/// Non-overlapping windows of the listed subjects, z-normalised per subject
/// when configured.
pub fn prepare_windows(ds: &Dataset, ids: &[String], cfg: &PipelineConfig) -> Result<Vec<PpgWindow>> {
    let mut out = Vec::new();
    for id in ids {
        let series = ds.subject(id).ok_or_else(|| Error::DataNotFound(format!("subject `{id}`")))?;
        let ws = window_subject(series, cfg.window_s, cfg.window_s, cfg.rate_hz)?;
        if ws.is_empty() {
            continue;
        }
        out.extend(if cfg.znorm { znorm_subject(&ws, StatsSource::All)?.0 } else { ws });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub skipped_anchors: usize,
}

/// Where checkpoints and loss curves go, and whether to resume from them.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

impl RunOptions {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: Some(dir.into()), resume: false }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }

    fn resume_from(&self, name: &str) -> Option<PathBuf> {
        self.path(name).filter(|p| self.resume && p.exists())
    }
}

fn write_csv(path: &Path, records: &[EpochRecord], with_skips: bool) -> Result<()> {
    let mut s = String::from(if with_skips { "epoch,train_loss,val_loss,skipped_anchors\n" } else { "epoch,train_loss,val_loss\n" });
    for r in records {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        if with_skips {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, val, r.skipped_anchors);
        } else {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, val);
        }
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, s)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn header_records(ck: &Checkpoint) -> Result<Vec<EpochRecord>> {
    serde_json::from_value(ck.header["records"].clone()).map_err(|e| Error::Format(e.to_string()))
}

fn header_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.header[key].as_u64().map(|v| v as usize).ok_or_else(|| Error::Format(format!("checkpoint header lacks `{key}`")))
}

/// Lower validation loss wins; runs without validation data compare train loss.
fn selection_loss(r: &EpochRecord) -> f64 {
    r.val_loss.unwrap_or(r.train_loss)
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    /// Best-by-validation model, frozen.
    pub model: DistanceModel,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains the distance model for `stage1.epochs` epochs, returning the
/// epoch with the lowest validation loss (masks for validation are fixed
/// across epochs).
pub fn run_stage1(cfg: &PipelineConfig, train: &[PpgWindow], val: &[PpgWindow], opts: &RunOptions) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("stage 1 needs a non-empty training corpus"));
    }
    let tcfg = cfg.distance_train_config();
    let mut trainer = DistanceTrainer::new(tcfg.clone())?;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, DistanceModel)> = None;

    if let Some(path) = opts.resume_from(STAGE1_LAST) {
        let ck = Checkpoint::load(&path)?;
        if ck.header["kind"] != "stage1_state" {
            return Err(Error::Format(format!("{} is not a stage-1 state checkpoint", path.display())));
        }
        ck.load_store("model.", &mut trainer.model.params)?;
        ck.load_vec("adam.m", &mut trainer.adam.m)?;
        ck.load_vec("adam.v", &mut trainer.adam.v)?;
        trainer.adam.step = ck.header["adam_step"].as_u64().unwrap_or(0);
        trainer.epoch = header_usize(&ck, "epoch")?;
        records = header_records(&ck)?;
        trainer.history = records.iter().map(|r| r.train_loss).collect();
        let best_epoch = header_usize(&ck, "best_epoch")?;
        let mut best_model = DistanceModel::from_checkpoint(&Checkpoint::load(&opts.path(STAGE1_BEST).expect("out dir"))?)?;
        best_model.freeze();
        best = Some((selection_loss(&records[best_epoch]), best_epoch, best_model));
        log::info!("stage 1: resuming at epoch {}", trainer.epoch);
    }

    while trainer.epoch < tcfg.epochs {
        let epoch = trainer.epoch;
        let train_loss = trainer.train_epoch(train)?;
        let val_loss = if val.is_empty() { None } else { Some(eval_masked_loss(&trainer.model, val, tcfg.mask_s, cfg.seed ^ 0x7661)?) };
        if val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { epoch, history: trainer.history.clone() });
        }
        let rec = EpochRecord { epoch, train_loss, val_loss, skipped_anchors: 0 };
        log::info!("stage 1 epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        let score = selection_loss(&rec);
        records.push(rec);
        let improved = best.as_ref().is_none_or(|b| score < b.0);
        if improved {
            let mut m = trainer.model.clone();
            m.freeze();
            best = Some((score, epoch, m));
        }
        let best_ref = best.as_ref().expect("best set");
        if let Some(dir) = &opts.out_dir {
            if improved {
                best_ref.2.to_checkpoint().save(&dir.join(STAGE1_BEST))?;
            }
            let mut ck = Checkpoint::new(json!({
                "kind": "stage1_state",
                "config": cfg,
                "epoch": trainer.epoch,
                "adam_step": trainer.adam.step,
                "best_epoch": best_ref.1,
                "records": records,
            }));
            ck.push_store("model.", &trainer.model.params);
            ck.push("adam.m", &[trainer.adam.m.len()], &trainer.adam.m);
            ck.push("adam.v", &[trainer.adam.v.len()], &trainer.adam.v);
            ck.save(&dir.join(STAGE1_LAST))?;
            write_csv(&dir.join(STAGE1_CSV), &records, false)?;
        }
    }
    let (_, best_epoch, model) = best.ok_or_else(|| invalid("stage 1 ran zero epochs"))?;
    Ok(Stage1Outcome { model, records, best_epoch })
}

/// Frozen-distance inputs for one corpus: cached distance features plus a
/// subject/hour index.
pub struct RelconCorpus<'a> {
    pub windows: &'a [PpgWindow],
    pub features: Vec<WindowFeatures>,
    pub index: SubjectIndex,
}

impl<'a> RelconCorpus<'a> {
    pub fn new(model: &DistanceModel, windows: &'a [PpgWindow]) -> Result<Self> {
        model.require_frozen()?;
        let features = par_map(windows, |w| model.window_features(w)).into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self { windows, features, index: SubjectIndex::new(windows) })
    }
}

/// Batches of anchors drawn from distinct subjects where possible: each
/// batch takes the next window (in `order`) of every subject not yet in it,
/// then fills up from the remaining windows.
pub fn assemble_batches(windows: &[PpgWindow], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut queue: VecDeque<usize> = order.iter().copied().collect();
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen: HashSet<&str> = HashSet::new();
        let mut rest = VecDeque::with_capacity(queue.len());
        while let Some(i) = queue.pop_front() {
            if batch.len() < batch_size && seen.insert(windows[i].subject_id.as_str()) {
                batch.push(i);
            } else {
                rest.push_back(i);
            }
        }
        while batch.len() < batch_size {
            match rest.pop_front() {
                Some(i) => batch.push(i),
                None => break,
            }
        }
        queue = rest;
        batches.push(batch);
    }
    batches
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Mean RelCon loss over the anchors that were not skipped.
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
    /// Encoder parameter gradient of `loss`, when requested.
    pub grad: Option<Vec<f64>>,
}

/// RelCon loss of one batch of anchors (and optionally its encoder
/// gradient). Anchors without a same-hour sibling, or whose batch holds no
/// other subject, are skipped and counted.
pub fn relcon_batch(
    encoder: &EncoderModel,
    model: &DistanceModel,
    corpus: &RelconCorpus<'_>,
    batch: &[usize],
    loss_cfg: &LossConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    want_grad: bool,
) -> Result<BatchLoss> {
    let mut sets = Vec::new();
    let mut skipped = 0;
    for &a in batch {
        match sample_candidates(a, corpus.windows, batch, &corpus.index, rng) {
            Ok(Some(set)) => sets.push(set),
            Ok(None) | Err(Error::DegenerateBatch(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if sets.is_empty() {
        return Ok(BatchLoss { loss: 0.0, used: 0, skipped, grad: want_grad.then(|| encoder.params.zeros()) });
    }
    let scored: Vec<Result<_>> = par_map(&sets, |set| {
        let mut set = set.clone();
        set.score(|a, c| model.distance_features(&corpus.features[a], &corpus.features[c]))?;
        Ok(set)
    });
    let sets = scored.into_iter().collect::<Result<Vec<_>>>()?;

    let mut needed: Vec<usize> = sets.iter().flat_map(|s| std::iter::once(s.anchor).chain(s.windows())).collect();
    needed.sort_unstable();
    needed.dedup();
    let embs = par_map(&needed, |&i| encoder.embed_values(&corpus.windows[i].values)).into_iter().collect::<Result<Vec<_>>>()?;
    let slot: BTreeMap<usize, usize> = needed.iter().enumerate().map(|(k, &i)| (i, k)).collect();

    let n_used = sets.len() as f64;
    let mut total = 0.0;
    let mut demb: Vec<Vec<f64>> = vec![vec![0.0; encoder.embedding_dim()]; needed.len()];
    for set in &sets {
        let cands: Vec<Vec<f64>> = set.windows().map(|w| embs[slot[&w]].clone()).collect();
        let (l, da, dc) = relcon_loss_grad(&embs[slot[&set.anchor]], &cands, &set.distances, loss_cfg)?;
        total += l;
        for (d, v) in demb[slot[&set.anchor]].iter_mut().zip(&da) {
            *d += v / n_used;
        }
        for (w, g) in set.windows().zip(&dc) {
            for (d, v) in demb[slot[&w]].iter_mut().zip(g) {
                *d += v / n_used;
            }
        }
    }
    let grad = if want_grad {
        let items: Vec<(&[f64], &[f64])> = needed
            .iter()
            .zip(&demb)
            .filter(|(_, d)| d.iter().any(|v| *v != 0.0))
            .map(|(&i, d)| (corpus.windows[i].values.as_slice(), d.as_slice()))
            .collect();
        Some(encoder.batch_param_grad(&items)?)
    } else {
        None
    };
    Ok(BatchLoss { loss: total / n_used, used: sets.len(), skipped, grad })
}

/// Mean batch loss over one pass of `corpus`, skipping updates.
fn relcon_eval(encoder: &EncoderModel, model: &DistanceModel, corpus: &RelconCorpus<'_>, cfg: &PipelineConfig, epoch: usize) -> Result<Option<f64>> {
    let mut rng = rng_for(cfg.seed, &[0x7632, epoch as u64]);
    let mut order: Vec<usize> = (0..corpus.windows.len()).collect();
    shuffle(&mut order, &mut rng);
    let mut weighted = 0.0;
    let mut used = 0usize;
    for batch in assemble_batches(corpus.windows, &order, cfg.stage2.batch_size) {
        let b = relcon_batch(encoder, model, corpus, &batch, &cfg.loss_config(), &mut rng, false)?;
        weighted += b.loss * b.used as f64;
        used += b.used;
    }
    Ok((used > 0).then(|| weighted / used as f64))
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    /// Best-by-validation encoder.
    pub encoder: EncoderModel,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub skipped_anchors: usize,
    /// Checksum of the distance model before and after the stage.
    pub distance_checksum: (u64, u64),
}

/// Trains the encoder with RelCon against the frozen `model`, with early
/// stopping after `stage2.patience` epochs without validation improvement.
pub fn run_stage2(
    cfg: &PipelineConfig,
    model: &DistanceModel,
    train: &[PpgWindow],
    val: &[PpgWindow],
    opts: &RunOptions,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if !model.is_frozen() {
        return Err(Error::Misuse("stage 2 needs a frozen distance model".into()));
    }
    if train.is_empty() {
        return Err(invalid("stage 2 needs a non-empty training corpus"));
    }
    let before = model.params.checksum();
    let train_c = RelconCorpus::new(model, train)?;
    let val_c = if val.is_empty() { None } else { Some(RelconCorpus::new(model, val)?) };
    let loss_cfg = cfg.loss_config();

    let mut encoder = EncoderModel::new(cfg.encoder_config(), cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.stage2.lr), encoder.params.len());
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, EncoderModel)> = None;
    let mut start = 0;

    if let Some(path) = opts.resume_from(STAGE2_LAST) {
        let ck = Checkpoint::load(&path)?;
        if ck.header["kind"] != "stage2_state" {
            return Err(Error::Format(format!("{} is not a stage-2 state checkpoint", path.display())));
        }
        ck.load_store("encoder.", &mut encoder.params)?;
        ck.load_vec("adam.m", &mut adam.m)?;
        ck.load_vec("adam.v", &mut adam.v)?;
        adam.step = ck.header["adam_step"].as_u64().unwrap_or(0);
        start = header_usize(&ck, "epoch")?;
        records = header_records(&ck)?;
        let best_epoch = header_usize(&ck, "best_epoch")?;
        let enc = EncoderModel::from_checkpoint(&Checkpoint::load(&opts.path(STAGE2_BEST).expect("out dir"))?)?;
        best = Some((selection_loss(&records[best_epoch]), best_epoch, enc));
        log::info!("stage 2: resuming at epoch {start}");
    }

    let mut since_best = records.len().saturating_sub(best.as_ref().map_or(0, |b| b.1 + 1));
    let mut stopped_early = false;
    for epoch in start..cfg.stage2.epochs {
        if since_best >= cfg.stage2.patience && epoch > 0 {
            stopped_early = true;
            break;
        }
        let mut rng = rng_for(cfg.seed, &[0x7631, epoch as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut losses = Vec::new();
        let mut skipped = 0;
        for batch in assemble_batches(train, &order, cfg.stage2.batch_size) {
            let b = relcon_batch(&encoder, model, &train_c, &batch, &loss_cfg, &mut rng, true)?;
            skipped += b.skipped;
            if b.used == 0 {
                continue;
            }
            let grad = b.grad.expect("gradient requested");
            if !b.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let mut history: Vec<f64> = records.iter().map(|r| r.train_loss).collect();
                history.push(b.loss);
                return Err(Error::TrainingDiverged { epoch, history });
            }
            adam.step(encoder.params.values_mut(), &grad);
            losses.push(b.loss);
        }
        if skipped > 0 {
            log::info!("stage 2 epoch {epoch}: skipped {skipped} anchors without a usable candidate set");
        }
        encoder.params.round_to_f32();
        adam.round_to_f32();
        let train_loss = crate::util::mean(&losses);
        let val_loss = match &val_c {
            Some(c) => relcon_eval(&encoder, model, c, cfg, epoch)?,
            None => None,
        };
        let rec = EpochRecord { epoch, train_loss, val_loss, skipped_anchors: skipped };
        log::info!("stage 2 epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        let score = selection_loss(&rec);
        records.push(rec);
        let improved = best.as_ref().is_none_or(|b| score < b.0);
        if improved {
            best = Some((score, epoch, encoder.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let best_ref = best.as_ref().expect("best set");
        if let Some(dir) = &opts.out_dir {
            if improved {
                best_ref.2.to_checkpoint().save(&dir.join(STAGE2_BEST))?;
            }
            let mut ck = Checkpoint::new(json!({
                "kind": "stage2_state",
                "config": cfg,
                "epoch": epoch + 1,
                "adam_step": adam.step,
                "best_epoch": best_ref.1,
                "records": records,
            }));
            ck.push_store("encoder.", &encoder.params);
            ck.push("adam.m", &[adam.m.len()], &adam.m);
            ck.push("adam.v", &[adam.v.len()], &adam.v);
            ck.save(&dir.join(STAGE2_LAST))?;
            write_csv(&dir.join(STAGE2_CSV), &records, true)?;
        }
    }
    let after = model.params.checksum();
    if before != after {
        return Err(Error::Misuse("distance model changed during stage 2".into()));
    }
    let skipped_anchors = records.iter().map(|r| r.skipped_anchors).sum();
    let (_, best_epoch, encoder) = best.ok_or_else(|| invalid("stage 2 ran zero epochs"))?;
    Ok(Stage2Outcome { encoder, records, best_epoch, stopped_early, skipped_anchors, distance_checksum: (before, after) })
}
