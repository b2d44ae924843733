//! Pretraining loop: augmentation, masking, the combined objective and AdamW.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ContrastMode, RunConfig};
use crate::datagen::{apply_augment, augment_text, mirror_report, AugmentDraw, PairedSample};
use crate::encoders::{MacoModel, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{lr_schedule, softplus_scalar, AdamW, Tape, Tensor};
use crate::objectives::{importance_scores, loss_infonce, loss_masked_contrastive, loss_pretext, loss_total, rescale_scores};
use crate::patching::{sample_mask, select_patches, standardize_patches, MaskPlan};

/// One optimizer step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_pret: f64,
    pub l_contra: f64,
    pub l_total: f64,
    pub tau: f64,
    pub mean_wc: f64,
}

/// Inputs of one step after augmentation and masking.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// Sampled low-resolution patches, `[B·N^s, lr_dim]`.
    pub patches: Tensor,
    pub positions: Vec<usize>,
    pub n_sampled: usize,
    pub plans: Vec<MaskPlan>,
    /// Full-resolution targets for every slot, `[B·N, hr_dim]`.
    pub targets: Tensor,
    /// Masked position maps, `[B, N]`.
    pub position_maps: Tensor,
    pub token_ids: Vec<usize>,
    pub seq_len: usize,
}

/// Augments, masks and tokenizes `samples`, drawing all randomness from `rng`.
pub fn prepare_batch(model: &MacoModel, cfg: &RunConfig, samples: &[&PairedSample], rng: &mut ChaCha8Rng) -> Result<PreparedBatch> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let g = model.config.geometry;
    let n = g.n_patches();
    let seq = model.config.text.max_len;
    let mut patches = Vec::new();
    let mut positions = Vec::new();
    let mut plans = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * n * g.hr_patch_dim());
    let mut maps = Vec::with_capacity(samples.len() * n);
    let mut ids = Vec::with_capacity(samples.len() * seq);
    for s in samples {
        let draw = if cfg.train.augment {
            AugmentDraw::sample(&cfg.augment, rng)
        } else {
            AugmentDraw::IDENTITY
        };
        let image = apply_augment(&s.image, draw, &cfg.augment);
        let plan = sample_mask(n, cfg.train.mask_ratio, rng)?;
        let lr = model.lr_grid(&image)?;
        let sel = select_patches(&lr, &plan)?;
        patches.extend_from_slice(sel.vectors.data());
        positions.extend_from_slice(&sel.positions);
        let hr = model.hr_grid(&image)?.patches;
        let hr = if cfg.train.standardize_targets { standardize_patches(&hr) } else { hr };
        targets.extend(hr.into_data());
        maps.extend_from_slice(&plan.position_map);
        let report = if draw.flip { mirror_report(&s.report) } else { s.report.clone() };
        let report = if cfg.train.augment { augment_text(&report, rng) } else { report };
        ids.extend(model.tokenize(&report)?);
        plans.push(plan);
    }
    let b = samples.len();
    let n_sampled = plans[0].n_sampled();
    Ok(PreparedBatch {
        patches: Tensor::matrix(b * n_sampled, g.lr_patch_dim(), patches)?,
        positions,
        n_sampled,
        plans,
        targets: Tensor::matrix(b * n, g.hr_patch_dim(), targets)?,
        position_maps: Tensor::matrix(b, n, maps)?,
        token_ids: ids,
        seq_len: seq,
    })
}

/// Scalar parts of the objective for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub l_pret: f64,
    pub l_contra: f64,
    pub l_total: f64,
    pub tau: f64,
    pub mean_wc: f64,
}

/// Records the full objective on `tape`; returns the loss variable and its parts.
pub fn forward_loss(
    model: &MacoModel,
    cfg: &RunConfig,
    batch: &PreparedBatch,
    tape: &mut Tape,
    p: &crate::numerics::Bound,
) -> Result<(crate::numerics::Var, LossParts)> {
    let v_enc = model.encode_image(tape, p, &batch.patches, &batch.positions, batch.n_sampled)?;
    let recon = model.decode_image(tape, p, v_enc, &batch.plans)?;
    let l_pret = loss_pretext(tape, recon, &batch.targets, &batch.plans)?;
    let t_enc = model.encode_text(tape, p, &batch.token_ids, batch.seq_len)?;
    let (v, t) = model.pool_and_project(tape, p, v_enc, batch.n_sampled, t_enc, batch.seq_len)?;
    let logits = tape.matmul_nt(v, t)?;
    let tau = model.tau_var(tape, p);
    let ws = importance_scores(tape, &batch.position_maps, model.importance_var(p))?;
    let wc = rescale_scores(tape, ws);
    let l_contra = match cfg.train.contrast {
        ContrastMode::Weighted => loss_masked_contrastive(tape, logits, tau, wc, cfg.train.contrast_options)?,
        ContrastMode::Clip => loss_infonce(tape, logits, tau)?,
    };
    let total = loss_total(tape, l_pret, l_contra, cfg.train.lambda)?;
    let wcv = tape.value(wc);
    let parts = LossParts {
        l_pret: tape.value(l_pret).item(),
        l_contra: tape.value(l_contra).item(),
        l_total: tape.value(total).item(),
        tau: tape.value(tau).item(),
        mean_wc: wcv.sum() / wcv.len() as f64,
    };
    Ok((total, parts))
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, kept as a string because it is 128 bits wide.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Model, optimizer and RNG: everything needed to resume a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: MacoModel,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

/// Stream of the training RNG; the model initialization uses the seed directly.
const TRAIN_STREAM: u64 = 1;

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = MacoModel::new(config.model, Vocabulary::synthetic(), config.seed)?;
        let params: Vec<_> = model.params.iter().cloned().collect();
        let optimizer = AdamW::new(config.train.optimizer, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.train.epochs
    }

    /// One optimizer step on `samples`.
    pub fn train_step(&mut self, samples: &[&PairedSample]) -> Result<LogRow> {
        let cfg = &self.config;
        let batch = prepare_batch(&self.model, cfg, samples, &mut self.rng)?;
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape);
        let (loss, parts) = forward_loss(&self.model, cfg, &batch, &mut tape, &p)?;
        if !parts.l_total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}", self.step + 1)));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = p.vars().iter().map(|&v| grads.wrt(v)).collect();
        let lr = lr_schedule(self.step, cfg.warmup_steps(), cfg.total_steps(), cfg.train.optimizer.lr);
        self.optimizer.step(lr, self.model.params.params_mut(), &g)?;
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            epoch: self.epoch + 1,
            lr,
            l_pret: parts.l_pret,
            l_contra: parts.l_contra,
            l_total: parts.l_total,
            tau: parts.tau,
            mean_wc: parts.mean_wc,
        })
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn train_epoch(&mut self, data: &[PairedSample]) -> Result<Vec<LogRow>> {
        if data.is_empty() {
            return Err(Error::Input("no training data".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut rows = Vec::with_capacity(order.len().div_ceil(self.config.train.batch_size));
        for chunk in order.chunks(self.config.train.batch_size) {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &data[i]).collect();
            rows.push(self.train_step(&batch)?);
        }
        self.epoch += 1;
        Ok(rows)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run<F>(&mut self, data: &[PairedSample], mut on_epoch: F) -> Result<Vec<LogRow>>
    where
        F: FnMut(&Trainer, &[LogRow]) -> Result<()>,
    {
        let mut all = Vec::new();
        while !self.is_finished() {
            let rows = self.train_epoch(data)?;
            on_epoch(self, &rows)?;
            all.extend(rows);
        }
        Ok(all)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.maco";
pub const LOG_FILE: &str = "train_log.csv";

/// Trains the remaining epochs, rewriting the log and checkpoint under
/// `out_dir` after every epoch. A failing epoch leaves both files as they
/// were after the last completed one.
pub fn pretrain(trainer: &mut Trainer, data: &[PairedSample], out_dir: &Path) -> Result<Vec<LogRow>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log = out_dir.join(LOG_FILE);
    let mut rows = if trainer.step > 0 && log.exists() {
        let mut r = read_log(&log)?;
        r.retain(|row| row.step <= trainer.step);
        r
    } else {
        Vec::new()
    };
    trainer.run(data, |t, epoch| {
        rows.extend_from_slice(epoch);
        write_log(&log, &rows)?;
        crate::checkpoint::save(&out_dir.join(CHECKPOINT_FILE), t)
    })?;
    Ok(rows)
}

/// Mean `W^c` the current head would assign to a fully visible image.
pub fn full_view_weight(model: &MacoModel) -> f64 {
    softplus_scalar(model.importance_weights().iter().sum())
}

/// Per-epoch means of `l_total`, in epoch order.
pub fn epoch_means(rows: &[LogRow]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.l_total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.l_total, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    crate::inference::write_csv(path, rows)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::io(path, std::io::Error::other(e))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, SceneSpec};
    use crate::encoders::PARAM_GROUPS;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.train = 8;
        c.train.epochs = 2;
        c.train.batch_size = 4;
        c
    }

    fn corpus(n: usize) -> Vec<PairedSample> {
        generate_corpus(&SceneSpec::default(), n, 3).unwrap()
    }

    #[test]
    fn batch_layout() {
        let cfg = tiny_config();
        let t = Trainer::new(cfg.clone()).unwrap();
        let data = corpus(3);
        let refs: Vec<&PairedSample> = data.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = prepare_batch(&t.model, &cfg, &refs, &mut rng).unwrap();
        assert_eq!(b.n_sampled, 16);
        assert_eq!(b.patches.shape(), &[48, 16]);
        assert_eq!(b.targets.shape(), &[192, 64]);
        assert_eq!(b.position_maps.shape(), &[3, 64]);
        assert_eq!(b.token_ids.len(), 72);
        assert!(b.position_maps.data().chunks(64).all(|r| r.iter().sum::<f64>() == 16.0));
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let cfg = tiny_config();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        // Break the zero-initialized head symmetry so every path is generic.
        let w: Vec<f64> = (0..64).map(|i| 0.01 * (i as f64).sin()).collect();
        t.model.params.set_value("importance.weight", Tensor::new(vec![64, 1], w).unwrap()).unwrap();
        let data = corpus(4);
        let refs: Vec<&PairedSample> = data.iter().collect();
        let batch = prepare_batch(&t.model, &cfg, &refs, &mut t.rng).unwrap();
        let mut tape = Tape::new();
        let p = t.model.bind(&mut tape);
        let (loss, _) = forward_loss(&t.model, &cfg, &batch, &mut tape, &p).unwrap();
        let g = tape.backward(loss).unwrap();
        for group in PARAM_GROUPS {
            let norm: f64 = t
                .model
                .params
                .iter()
                .zip(p.vars())
                .filter(|(param, _)| param.name.starts_with(group))
                .map(|(_, &v)| g.wrt(v).data().iter().map(|x| x * x).sum::<f64>())
                .sum();
            assert!(norm > 0.0, "group {group} has zero gradient");
        }
    }

    #[test]
    fn logged_total_matches_its_parts() {
        let cfg = tiny_config();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let rows = t.train_epoch(&corpus(8)).unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            let recomputed = cfg.train.lambda * r.l_pret + (1.0 - cfg.train.lambda) * r.l_contra;
            assert!((r.l_total - recomputed).abs() <= 1e-12);
            assert!([r.lr, r.l_pret, r.l_contra, r.tau, r.mean_wc].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn pure_pretext_leaves_projections_untouched() {
        let mut cfg = tiny_config();
        cfg.train.lambda = 1.0;
        cfg.train.optimizer.weight_decay = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before: Vec<Tensor> = t.model.params.iter().filter(|p| p.name.starts_with("proj.")).map(|p| p.value.clone()).collect();
        let rows = t.train_epoch(&corpus(8)).unwrap();
        assert!(rows.iter().all(|r| r.l_contra.is_finite() && r.l_contra > 0.0));
        let after: Vec<Tensor> = t.model.params.iter().filter(|p| p.name.starts_with("proj.")).map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn clip_mode_keeps_head_uniform() {
        let mut cfg = tiny_config();
        cfg.train.contrast = ContrastMode::Clip;
        let mut t = Trainer::new(cfg).unwrap();
        t.train_epoch(&corpus(8)).unwrap();
        assert!(t.model.importance_weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn same_seed_same_log() {
        let data = corpus(8);
        let run = || {
            let mut t = Trainer::new(tiny_config()).unwrap();
            t.run(&data, |_, _| Ok(())).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_abort_keeps_last_good_checkpoint() {
        let dir = std::env::temp_dir().join(format!("maco-nan-{}", std::process::id()));
        let mut cfg = tiny_config();
        cfg.train.epochs = 1;
        let data = corpus(8);
        let mut t = Trainer::new(cfg).unwrap();
        pretrain(&mut t, &data, &dir).unwrap();
        let ckpt = dir.join(CHECKPOINT_FILE);
        let before = std::fs::read(&ckpt).unwrap();

        t.config.train.epochs = 2;
        let w = t.model.params.by_name("proj.image.weight").unwrap().value.clone();
        let poisoned = Tensor::full(w.shape(), f64::NAN);
        t.model.params.set_value("proj.image.weight", poisoned).unwrap();
        assert!(matches!(pretrain(&mut t, &data, &dir), Err(Error::Numerical(_))));
        assert_eq!(std::fs::read(&ckpt).unwrap(), before);
        assert_eq!(read_log(&dir.join(LOG_FILE)).unwrap().len(), 2);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn resumed_pretrain_extends_the_log() {
        let dir = std::env::temp_dir().join(format!("maco-resume-{}", std::process::id()));
        let data = corpus(8);
        let mut straight = Trainer::new(tiny_config()).unwrap();
        let all = straight.run(&data, |_, _| Ok(())).unwrap();

        // Interrupted after the first of two epochs.
        std::fs::create_dir_all(&dir).unwrap();
        let mut first = Trainer::new(tiny_config()).unwrap();
        write_log(&dir.join(LOG_FILE), &first.train_epoch(&data).unwrap()).unwrap();
        crate::checkpoint::save(&dir.join(CHECKPOINT_FILE), &first).unwrap();
        let mut resumed = crate::checkpoint::load(&dir.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(pretrain(&mut resumed, &data, &dir).unwrap(), all);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        let _: u64 = rand::Rng::random(&mut rng);
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rand::Rng::random::<u64>(&mut rng), rand::Rng::random::<u64>(&mut restored));
    }

    #[test]
    fn epoch_means_group_rows() {
        let row = |epoch, l_total| LogRow {
            step: 0,
            epoch,
            lr: 0.0,
            l_pret: 0.0,
            l_contra: 0.0,
            l_total,
            tau: 0.0,
            mean_wc: 0.0,
        };
        assert_eq!(epoch_means(&[row(1, 1.0), row(1, 3.0), row(2, 5.0)]), vec![2.0, 5.0]);
    }

    #[test]
    fn log_csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("maco-log-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut t = Trainer::new(tiny_config()).unwrap();
        let rows = t.train_epoch(&corpus(8)).unwrap();
        let path = dir.join("log.csv");
        write_log(&path, &rows).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("step,epoch,lr,l_pret,l_contra,l_total,tau,mean_wc\n"));
        assert_eq!(read_log(&path).unwrap(), rows);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
