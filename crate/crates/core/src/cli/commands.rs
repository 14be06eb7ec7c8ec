use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ppg_relcon::dataset::{read_labels, Dataset, WindowLabel};
use ppg_relcon::distance::DistanceModel;
use ppg_relcon::encoder::EncoderModel;
use ppg_relcon::eval::{
    finetune, linear_probe_classify, linear_probe_regress, naive_classify, naive_regress, render_table, MetricReport, Metrics, Targets,
};
use ppg_relcon::nn::checkpoint::Checkpoint;
use ppg_relcon::pipeline::{prepare_windows, run_stage1, run_stage2, RunOptions, STAGE1_BEST, STAGE2_BEST};
use ppg_relcon::signal::PpgWindow;
use ppg_relcon::synth::{gen_task, Task};
use ppg_relcon::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn data_root(&self) -> PathBuf {
        self.cfg.data.root.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn stage_dir(&self, name: &str) -> anyhow::Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    /// Writes the resolved configuration beside the command's outputs.
    pub fn snapshot(&self, command: &str) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(format!("resolved_config.{command}.toml")), self.cfg.to_toml())?;
        Ok(())
    }

    fn load_dataset(&self) -> anyhow::Result<Dataset> {
        Ok(Dataset::load(&self.data_root())?)
    }
}

pub fn gen_data(ctx: &Ctx) -> anyhow::Result<()> {
    let root = ctx.data_root();
    let task = gen_task(&ctx.cfg.data.synth, ctx.cfg.data.task)?;
    task.save(&root)?;
    println!(
        "wrote {} subjects ({} windows) to {}",
        task.corpus.subjects.len(),
        task.labels.len(),
        root.display()
    );
    Ok(())
}

pub fn pretrain_distance(ctx: &Ctx, resume: bool) -> anyhow::Result<()> {
    let ds = ctx.load_dataset()?;
    let p = &ctx.cfg.pipeline;
    let train = prepare_windows(&ds, &ds.splits.train, p)?;
    let val = prepare_windows(&ds, &ds.splits.val, p)?;
    let dir = ctx.stage_dir("stage1")?;
    let out = run_stage1(p, &train, &val, &RunOptions { out_dir: Some(dir.clone()), resume })?;
    println!(
        "stage 1: {} epochs, best epoch {} (val loss {:?}); checkpoint {}",
        out.records.len(),
        out.best_epoch,
        out.records[out.best_epoch].val_loss,
        dir.join(STAGE1_BEST).display()
    );
    Ok(())
}

pub fn pretrain_encoder(ctx: &Ctx, distance: Option<&Path>, resume: bool) -> anyhow::Result<()> {
    let ds = ctx.load_dataset()?;
    let ck_path = distance.map(Path::to_path_buf).unwrap_or_else(|| ctx.out.join("stage1").join(STAGE1_BEST));
    let mut model = DistanceModel::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
    model.freeze();
    let p = &ctx.cfg.pipeline;
    let train = prepare_windows(&ds, &ds.splits.train, p)?;
    let val = prepare_windows(&ds, &ds.splits.val, p)?;
    let dir = ctx.stage_dir("stage2")?;
    let out = run_stage2(p, &model, &train, &val, &RunOptions { out_dir: Some(dir.clone()), resume })?;
    println!(
        "stage 2: {} epochs{}, best epoch {}, {} skipped anchors; checkpoint {}",
        out.records.len(),
        if out.stopped_early { " (early stop)" } else { "" },
        out.best_epoch,
        out.skipped_anchors,
        dir.join(STAGE2_BEST).display()
    );
    Ok(())
}

/// Sidecar of an embeddings file.
#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub count: usize,
    pub dim: usize,
    pub window_ids: Vec<String>,
}

pub fn write_embeddings(path: &Path, ids: &[String], rows: &[Vec<f64>]) -> anyhow::Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut buf = Vec::with_capacity(rows.len() * dim * 4);
    for r in rows {
        for &v in r {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    let meta = EmbeddingMeta { count: rows.len(), dim, window_ids: ids.to_vec() };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let not_found = |p: &Path| Error::DataNotFound(p.display().to_string());
    let side = path.with_extension("json");
    let meta: EmbeddingMeta = serde_json::from_str(&fs::read_to_string(&side).map_err(|_| not_found(&side))?)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let bytes = fs::read(path).map_err(|_| not_found(path))?;
    if bytes.len() != meta.count * meta.dim * 4 || meta.window_ids.len() != meta.count {
        return Err(Error::Format(format!("{}: size disagrees with its sidecar", path.display())).into());
    }
    let vals: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let rows = if meta.dim == 0 { Vec::new() } else { vals.chunks(meta.dim).map(<[f64]>::to_vec).collect() };
    Ok((meta.window_ids, rows))
}

fn load_encoder(ctx: &Ctx, path: Option<&Path>) -> anyhow::Result<EncoderModel> {
    let p = path.map(Path::to_path_buf).unwrap_or_else(|| ctx.out.join("stage2").join(STAGE2_BEST));
    Ok(EncoderModel::from_checkpoint(&Checkpoint::load(&p)?)?)
}

fn split_windows(ctx: &Ctx, ds: &Dataset) -> anyhow::Result<[(&'static str, Vec<PpgWindow>); 3]> {
    let p = &ctx.cfg.pipeline;
    Ok([
        ("train", prepare_windows(ds, &ds.splits.train, p)?),
        ("val", prepare_windows(ds, &ds.splits.val, p)?),
        ("test", prepare_windows(ds, &ds.splits.test, p)?),
    ])
}

pub fn embed(ctx: &Ctx, encoder: Option<&Path>) -> anyhow::Result<()> {
    let ds = ctx.load_dataset()?;
    let enc = load_encoder(ctx, encoder)?;
    let dir = ctx.stage_dir("embeddings")?;
    for (name, windows) in split_windows(ctx, &ds)? {
        let embs = enc.embed_batch(&windows)?;
        let ids: Vec<String> = embs.iter().map(|e| e.source_window_id.clone()).collect();
        let rows: Vec<Vec<f64>> = embs.into_iter().map(|e| e.vector).collect();
        write_embeddings(&dir.join(format!("{name}.f32")), &ids, &rows)?;
        println!("{name}: {} embeddings of dim {}", rows.len(), enc.embedding_dim());
    }
    Ok(())
}

fn labels_by_id(ctx: &Ctx) -> anyhow::Result<HashMap<String, WindowLabel>> {
    Ok(read_labels(&ctx.data_root())?.into_iter().map(|l| (l.window_id.clone(), l)).collect())
}

fn lookup<'a>(labels: &'a HashMap<String, WindowLabel>, ids: &[String]) -> anyhow::Result<Vec<&'a WindowLabel>> {
    ids.iter()
        .map(|id| labels.get(id).ok_or_else(|| Error::Format(format!("no label for window `{id}`")).into()))
        .collect()
}

fn n_classes(labels: &HashMap<String, WindowLabel>) -> usize {
    labels.values().map(|l| l.class + 1).max().unwrap_or(0).max(2)
}

fn targets(task: Task, labels: &[&WindowLabel], k: usize) -> Targets {
    if task.is_regression() {
        Targets::Values(labels.iter().map(|l| l.hr_bpm).collect())
    } else {
        Targets::Classes { labels: labels.iter().map(|l| l.class).collect(), n_classes: k }
    }
}

fn save_report(ctx: &Ctx, report: &MetricReport) -> anyhow::Result<PathBuf> {
    let dir = ctx.stage_dir("reports")?;
    let path = dir.join(format!("{}.json", report.name));
    report.save(&path)?;
    print!("{}", render_table(std::slice::from_ref(report)));
    println!("report: {}", path.display());
    Ok(path)
}

pub fn probe(ctx: &Ctx, embeddings: Option<&Path>) -> anyhow::Result<()> {
    let dir = embeddings.map(Path::to_path_buf).unwrap_or_else(|| ctx.out.join("embeddings"));
    let (tr_ids, mut tr_x) = read_embeddings(&dir.join("train.f32"))?;
    let (va_ids, va_x) = read_embeddings(&dir.join("val.f32"))?;
    let (te_ids, te_x) = read_embeddings(&dir.join("test.f32"))?;
    let labels = labels_by_id(ctx)?;
    let mut fit_ids = tr_ids;
    fit_ids.extend(va_ids);
    tr_x.extend(va_x);
    let fit_l = lookup(&labels, &fit_ids)?;
    let test_l = lookup(&labels, &te_ids)?;
    let task = ctx.cfg.data.task;
    let report = if task.is_regression() {
        let y: Vec<f64> = fit_l.iter().map(|l| l.hr_bpm).collect();
        let yt: Vec<f64> = test_l.iter().map(|l| l.hr_bpm).collect();
        let out = linear_probe_regress(&tr_x, &y, &te_x, &yt, &ctx.cfg.probe)?;
        let mut r = MetricReport::new("linear_probe", Metrics::Regression(out.metrics));
        r.details = json!({ "task": task, "best": out.best, "cv_scores": out.cv_scores });
        r
    } else {
        let k = n_classes(&labels);
        let y: Vec<usize> = fit_l.iter().map(|l| l.class).collect();
        let yt: Vec<usize> = test_l.iter().map(|l| l.class).collect();
        let out = linear_probe_classify(&tr_x, &y, &te_x, &yt, k, &ctx.cfg.probe)?;
        let mut r = MetricReport::new("linear_probe", Metrics::Classification(out.metrics));
        r.details = json!({ "task": task, "best": out.best, "cv_scores": out.cv_scores });
        r
    };
    save_report(ctx, &report)?;
    Ok(())
}

pub fn finetune_cmd(ctx: &Ctx, encoder: Option<&Path>) -> anyhow::Result<()> {
    let ds = ctx.load_dataset()?;
    let enc = load_encoder(ctx, encoder)?;
    let labels = labels_by_id(ctx)?;
    let k = n_classes(&labels);
    let task = ctx.cfg.data.task;
    let [(_, tr), (_, va), (_, te)] = split_windows(ctx, &ds)?;
    let tgt = |ws: &[PpgWindow]| -> anyhow::Result<Targets> {
        let ids: Vec<String> = ws.iter().map(PpgWindow::id).collect();
        Ok(targets(task, &lookup(&labels, &ids)?, k))
    };
    let (ytr, yva, yte) = (tgt(&tr)?, tgt(&va)?, tgt(&te)?);
    let out = finetune(&enc, (&tr, &ytr), (&va, &yva), (&te, &yte), &ctx.cfg.finetune)?;
    let mut r = MetricReport::new("finetune", out.metrics);
    r.details = json!({ "task": task, "best_epoch": out.best_epoch, "train_loss": out.train_loss, "val_score": out.val_score });
    save_report(ctx, &r)?;
    if let Some(e) = out.encoder {
        e.to_checkpoint().save(&ctx.stage_dir("finetune")?.join("encoder.ckpt"))?;
    }
    Ok(())
}

pub fn naive(ctx: &Ctx) -> anyhow::Result<()> {
    let ds = ctx.load_dataset()?;
    let labels = labels_by_id(ctx)?;
    let task = ctx.cfg.data.task;
    let [(_, tr), (_, va), (_, te)] = split_windows(ctx, &ds)?;
    let ids = |ws: &[PpgWindow]| ws.iter().map(PpgWindow::id).collect::<Vec<_>>();
    let mut fit = ids(&tr);
    fit.extend(ids(&va));
    let fit_l = lookup(&labels, &fit)?;
    let test_l = lookup(&labels, &ids(&te))?;
    let metrics = if task.is_regression() {
        let y: Vec<f64> = fit_l.iter().map(|l| l.hr_bpm).collect();
        let yt: Vec<f64> = test_l.iter().map(|l| l.hr_bpm).collect();
        Metrics::Regression(naive_regress(&y, &yt)?)
    } else {
        let k = n_classes(&labels);
        let y: Vec<usize> = fit_l.iter().map(|l| l.class).collect();
        let yt: Vec<usize> = test_l.iter().map(|l| l.class).collect();
        Metrics::Classification(naive_classify(&y, &yt, k)?)
    };
    let mut r = MetricReport::new("naive", metrics);
    r.details = json!({ "task": task });
    save_report(ctx, &r)?;
    Ok(())
}

pub fn report(paths: &[PathBuf]) -> anyhow::Result<()> {
    let reports = paths
        .iter()
        .map(|p| MetricReport::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    print!("{}", render_table(&reports));
    Ok(())
}
