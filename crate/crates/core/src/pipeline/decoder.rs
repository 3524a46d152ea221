//! Soft-prompt conditioned autoregressive decoder.
//!
//! The prompt generator maps a noisy continuation embedding to `k` soft
//! tokens (one linear map, then bidirectional blocks modulated by the noise
//! level). The decoder is a causal pre-norm transformer over
//! `[prefix][soft tokens][continuation]`; only continuation tokens are
//! scored.

use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Mat, Var};
use crate::checkpoint::Checkpoint;
use crate::denoiser::load_params;
use crate::error::{check_dim, Error, Result};
use crate::nn::{normal_mat, param_grads, AdamW, AdamWConfig, Block, Bound, Linear, LrSchedule, ParamId, ParamSet, TimeEmbed};
use crate::schedules::Schedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub soft_tokens: usize,
    pub prompt_layers: usize,
    pub max_len: usize,
    pub time_features: usize,
    /// Shift of the scaled-cosine augmentation schedule.
    pub aug_shift: f64,
}

impl DecoderConfig {
    pub fn new(vocab: usize, embed_dim: usize) -> Self {
        Self {
            vocab,
            embed_dim,
            width: 128,
            layers: 4,
            heads: 4,
            soft_tokens: 8,
            prompt_layers: 1,
            max_len: 96,
            time_features: 32,
            aug_shift: 3.0,
        }
    }

    pub fn aug_schedule(&self) -> Schedule {
        Schedule::scaled_cosine(self.aug_shift)
    }
}

pub struct SemanticDecoder {
    cfg: DecoderConfig,
    params: ParamSet,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    head: Linear,
    pg_in: Linear,
    pg_pos: ParamId,
    pg_time: TimeEmbed,
    pg_blocks: Vec<Block>,
}

/// Teacher-forced training examples with already-noised proposals.
#[derive(Clone, Debug)]
pub struct DecoderBatch {
    pub prefixes: Vec<Vec<usize>>,
    pub continuations: Vec<Vec<usize>>,
    /// Noisy proposals, one row per example.
    pub z: Mat,
    pub lambdas: Vec<f64>,
}

impl SemanticDecoder {
    pub fn new<R: Rng + ?Sized>(cfg: DecoderConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let w = cfg.width;
        let tok = params.add("dec.tok", normal_mat(rng, cfg.vocab, w, 1.0));
        let pos = params.add("dec.pos", normal_mat(rng, cfg.max_len, w, 0.1));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut params, rng, &format!("dec.block{i}"), w, cfg.heads, None))
            .collect();
        let head = Linear::new(&mut params, rng, "dec.head", w, cfg.vocab, 1.0);
        let pg_in = Linear::new(&mut params, rng, "pg.in", cfg.embed_dim, cfg.soft_tokens * w, 1.0);
        let pg_pos = params.add("pg.pos", normal_mat(rng, cfg.soft_tokens, w, 0.1));
        let pg_time = TimeEmbed::new(&mut params, rng, "pg.time", cfg.time_features, w);
        let pg_blocks = (0..cfg.prompt_layers)
            .map(|i| Block::new(&mut params, rng, &format!("pg.block{i}"), w, cfg.heads, Some(w)))
            .collect();
        params.round_to_f32();
        Self { cfg, params, tok, pos, blocks, head, pg_in, pg_pos, pg_time, pg_blocks }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn time_level(&self, lambda: f64) -> f64 {
        let s = self.cfg.aug_schedule();
        s.normalized(s.clamp_lambda(lambda))
    }

    /// Soft tokens for `z` (B × embed_dim), laid out as B blocks of `k` rows.
    fn prompt<'g>(&self, g: &'g Graph, p: &Bound<'g>, z: &Mat, lambdas: &[f64]) -> Var<'g> {
        let (b, k, w) = (z.nrows(), self.cfg.soft_tokens, self.cfg.width);
        let lin = self.pg_in.forward(p, g.leaf(z.clone()));
        let stacked = Var::concat_rows(&(0..k).map(|j| lin.slice_cols(j * w, w)).collect::<Vec<_>>());
        // row j·B + i  →  row i·k + j
        let order: Vec<usize> = (0..b).flat_map(|i| (0..k).map(move |j| j * b + i)).collect();
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..k).collect();
        let mut x = stacked.gather(&order).add(p[self.pg_pos].gather(&pos_ids));
        let levels: Vec<f64> = lambdas.iter().map(|l| self.time_level(*l)).collect();
        let cond = self
            .pg_time
            .forward(p, g.leaf(self.pg_time.feature_rows(&levels)))
            .repeat_rows(k);
        for blk in &self.pg_blocks {
            x = blk.forward(p, x, Some(cond), b, k, false);
        }
        x
    }

    /// Logits for `[prefix_i][soft_i][inputs_i]`; all prefixes share one
    /// length, as do all inputs.
    fn logits<'g>(&self, p: &Bound<'g>, prefixes: &[Vec<usize>], soft: Var<'g>, inputs: &[Vec<usize>]) -> Var<'g> {
        let k = self.cfg.soft_tokens;
        let seq = prefixes[0].len() + k + inputs[0].len();
        let table = p[self.tok];
        let rows: Vec<Var<'g>> = prefixes
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(i, (pre, inp))| {
                let mut parts = Vec::with_capacity(3);
                if !pre.is_empty() {
                    parts.push(table.gather(pre));
                }
                parts.push(soft.slice_rows(i * k, k));
                if !inp.is_empty() {
                    parts.push(table.gather(inp));
                }
                Var::concat_rows(&parts)
            })
            .collect();
        let pos_ids: Vec<usize> = (0..prefixes.len()).flat_map(|_| 0..seq).collect();
        let mut x = Var::concat_rows(&rows).add(p[self.pos].gather(&pos_ids));
        for blk in &self.blocks {
            x = blk.forward(p, x, None, prefixes.len(), seq, true);
        }
        self.head.forward(p, x.rms_norm(1e-6))
    }

    fn check_batch(&self, prefixes: &[Vec<usize>], other: &[Vec<usize>]) -> Result<()> {
        if prefixes.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        check_dim(prefixes.len(), other.len())?;
        let (lp, lo) = (prefixes[0].len(), other[0].len());
        for (a, b) in prefixes.iter().zip(other) {
            if a.len() != lp || b.len() != lo {
                return Err(Error::InvalidInput("sequences in one batch must share lengths".into()));
            }
            if let Some(t) = a.iter().chain(b).find(|&&t| t >= self.cfg.vocab) {
                return Err(Error::InvalidInput(format!("token id {t} outside the vocabulary")));
            }
        }
        Ok(())
    }

    /// Truncates continuations so every sequence fits in `max_len`.
    fn fit_lengths(&self, batch: &DecoderBatch) -> Result<Vec<Vec<usize>>> {
        let room = self.cfg.max_len + 1;
        let fixed = batch.prefixes[0].len() + self.cfg.soft_tokens;
        if fixed >= room {
            return Err(Error::InvalidInput("prefix and soft prompt exceed the maximum length".into()));
        }
        let keep = room - fixed;
        if batch.continuations[0].len() > keep {
            warn!("truncating continuations from {} to {keep} tokens", batch.continuations[0].len());
        }
        Ok(batch.continuations.iter().map(|c| c[..c.len().min(keep)].to_vec()).collect())
    }

    /// Mean continuation cross-entropy and parameter gradients.
    pub fn batch_loss(&self, batch: &DecoderBatch) -> Result<(f64, Vec<Mat>)> {
        self.check_batch(&batch.prefixes, &batch.continuations)?;
        check_dim(batch.prefixes.len(), batch.z.nrows())?;
        check_dim(self.cfg.embed_dim, batch.z.ncols())?;
        check_dim(batch.prefixes.len(), batch.lambdas.len())?;
        let conts = self.fit_lengths(batch)?;
        if conts[0].is_empty() {
            return Err(Error::InvalidInput("empty continuation".into()));
        }
        let g = Graph::new();
        let p = self.params.bind(&g);
        let soft = self.prompt(&g, &p, &batch.z, &batch.lambdas);
        let inputs: Vec<Vec<usize>> = conts.iter().map(|c| c[..c.len() - 1].to_vec()).collect();
        let logits = self.logits(&p, &batch.prefixes, soft, &inputs);
        let targets = continuation_targets(batch.prefixes[0].len(), self.cfg.soft_tokens, &conts);
        let loss = logits.cross_entropy(&targets, (conts.len() * conts[0].len()) as f64);
        let value = loss.scalar();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("decoder loss {value}")));
        }
        let grads = g.backward_scalar(loss);
        Ok((value, param_grads(&self.params, &p, &grads)))
    }

    /// Soft tokens for already-noised proposals; `B·k × width`.
    pub fn soft_prompt(&self, z: &Mat, lambdas: &[f64]) -> Result<Mat> {
        check_dim(self.cfg.embed_dim, z.ncols())?;
        check_dim(z.nrows(), lambdas.len())?;
        let g = Graph::new();
        let p = self.params.bind(&g);
        Ok(self.prompt(&g, &p, z, lambdas).to_owned())
    }

    /// Next-token logits (one row per sequence) given precomputed soft
    /// tokens.
    pub fn next_logits(&self, prefixes: &[Vec<usize>], soft: &Mat, generated: &[Vec<usize>]) -> Result<Mat> {
        self.check_batch(prefixes, generated)?;
        check_dim(prefixes.len() * self.cfg.soft_tokens, soft.nrows())?;
        let seq = prefixes[0].len() + self.cfg.soft_tokens + generated[0].len();
        if seq > self.cfg.max_len {
            return Err(Error::InvalidInput(format!("sequence length {seq} exceeds {}", self.cfg.max_len)));
        }
        let g = Graph::new();
        let p = self.params.bind(&g);
        let logits = self.logits(&p, prefixes, g.leaf(soft.clone()), generated);
        let all = logits.value();
        let mut out = Mat::zeros((prefixes.len(), self.cfg.vocab));
        for i in 0..prefixes.len() {
            out.row_mut(i).assign(&all.row(i * seq + seq - 1));
        }
        Ok(out)
    }

    /// Ancestral sampling at temperature 1. `proposals` (one row per prefix)
    /// are noised to variance `noise_var`; `None` conditions on pure noise.
    /// Sample `i` draws its noise and tokens from a stream seeded by
    /// `seeds[i]`.
    pub fn generate(
        &self,
        prefixes: &[Vec<usize>],
        proposals: Option<&Mat>,
        noise_var: f64,
        max_tokens: usize,
        seeds: &[u64],
    ) -> Result<Vec<Vec<usize>>> {
        if !(0.0..=1.0).contains(&noise_var) {
            return Err(Error::InvalidInput(format!("noise variance {noise_var} outside [0, 1]")));
        }
        check_dim(prefixes.len(), seeds.len())?;
        if let Some(x) = proposals {
            check_dim(prefixes.len(), x.nrows())?;
            check_dim(self.cfg.embed_dim, x.ncols())?;
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|s| ChaCha8Rng::seed_from_u64(*s)).collect();
        let (alpha, sigma) = match proposals {
            Some(_) => ((1.0 - noise_var).sqrt(), noise_var.sqrt()),
            None => (0.0, 1.0),
        };
        let lambda = (alpha * alpha / (sigma * sigma)).ln();
        let d = self.cfg.embed_dim;
        let mut z = Mat::zeros((prefixes.len(), d));
        for (i, rng) in rngs.iter_mut().enumerate() {
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                let x = proposals.map_or(0.0, |p| p[[i, j]]);
                z[[i, j]] = alpha * x + sigma * e;
            }
        }

        let mut out = vec![Vec::with_capacity(max_tokens); prefixes.len()];
        // batches of equal prefix length
        let mut lengths: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        for len in lengths {
            let idx: Vec<usize> = (0..prefixes.len()).filter(|&i| prefixes[i].len() == len).collect();
            let group_prefix: Vec<Vec<usize>> = idx.iter().map(|&i| prefixes[i].clone()).collect();
            let group_z = z.select(ndarray::Axis(0), &idx);
            let soft = self.soft_prompt(&group_z, &vec![lambda; idx.len()])?;
            let mut generated = vec![Vec::new(); idx.len()];
            for _ in 0..max_tokens {
                let logits = self.next_logits(&group_prefix, &soft, &generated)?;
                for (r, &i) in idx.iter().enumerate() {
                    let tok = sample_logits(logits.row(r), &mut rngs[i]);
                    generated[r].push(tok);
                }
            }
            for (r, &i) in idx.iter().enumerate() {
                out[i] = std::mem::take(&mut generated[r]);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.cfg;
        let mut ck = Checkpoint::new("decoder");
        ck.push_meta("vocab", c.vocab);
        ck.push_meta("embed_dim", c.embed_dim);
        ck.push_meta("width", c.width);
        ck.push_meta("layers", c.layers);
        ck.push_meta("heads", c.heads);
        ck.push_meta("soft_tokens", c.soft_tokens);
        ck.push_meta("prompt_layers", c.prompt_layers);
        ck.push_meta("max_len", c.max_len);
        ck.push_meta("time_features", c.time_features);
        ck.push_meta("aug_shift", c.aug_shift);
        for (name, v) in self.params.names().iter().zip(self.params.values()) {
            ck.tensors.push((name.clone(), v.clone()));
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("decoder")?;
        let cfg = DecoderConfig {
            vocab: c.meta_parse("vocab")?,
            embed_dim: c.meta_parse("embed_dim")?,
            width: c.meta_parse("width")?,
            layers: c.meta_parse("layers")?,
            heads: c.meta_parse("heads")?,
            soft_tokens: c.meta_parse("soft_tokens")?,
            prompt_layers: c.meta_parse("prompt_layers")?,
            max_len: c.meta_parse("max_len")?,
            time_features: c.meta_parse("time_features")?,
            aug_shift: c.meta_parse("aug_shift")?,
        };
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::Format("width must be divisible by heads".into()));
        }
        let mut model = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        load_params(&mut model.params, c)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-position labels for `[prefix][soft][continuation[..L-1]]`: position
/// `lp + k - 1 + j` predicts continuation token `j`; every other position
/// is unlabeled.
fn continuation_targets(lp: usize, k: usize, conts: &[Vec<usize>]) -> Vec<Option<usize>> {
    let lc = conts[0].len();
    let seq = lp + k + lc - 1;
    let mut targets = vec![None; conts.len() * seq];
    for (i, c) in conts.iter().enumerate() {
        for (j, &t) in c.iter().enumerate() {
            targets[i * seq + lp + k - 1 + j] = Some(t);
        }
    }
    targets
}

fn sample_logits<R: Rng + ?Sized>(logits: ndarray::ArrayView1<f64>, rng: &mut R) -> usize {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, x) in w.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub warmup: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 3000,
            warmup: 200,
            batch: 32,
            seed: 0,
            adam: AdamWConfig::default(),
        }
    }
}

pub struct DecoderTrainer {
    pub cfg: DecoderTrainConfig,
    opt: AdamW,
    lr: LrSchedule,
    step: usize,
}

impl DecoderTrainer {
    pub fn new(model: &SemanticDecoder, cfg: DecoderTrainConfig) -> Self {
        Self {
            opt: AdamW::new(model.params(), cfg.adam),
            lr: LrSchedule { peak: cfg.lr, warmup: cfg.warmup, total: cfg.steps },
            step: 0,
            cfg,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Noises clean continuation embeddings `x` at `t ~ U[0, 1]` under the
    /// augmentation schedule.
    pub fn draw_batch<R: Rng + ?Sized>(
        model: &SemanticDecoder,
        prefixes: Vec<Vec<usize>>,
        continuations: Vec<Vec<usize>>,
        x: &Mat,
        rng: &mut R,
    ) -> Result<DecoderBatch> {
        let sched = model.config().aug_schedule();
        let mut z = x.clone();
        let mut lambdas = Vec::with_capacity(x.nrows());
        for mut row in z.rows_mut() {
            let t: f64 = rng.random();
            let level = sched.level(t)?;
            for v in row.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v = level.alpha * *v + level.sigma * e;
            }
            lambdas.push(level.lambda);
        }
        Ok(DecoderBatch { prefixes, continuations, z, lambdas })
    }

    /// One joint update of decoder and prompt generator; returns the batch
    /// loss before the update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        model: &mut SemanticDecoder,
        prefixes: Vec<Vec<usize>>,
        continuations: Vec<Vec<usize>>,
        x: &Mat,
        rng: &mut R,
    ) -> Result<f64> {
        let batch = Self::draw_batch(model, prefixes, continuations, x, rng)?;
        let (loss, mut grads) = model.batch_loss(&batch)?;
        let lr = self.lr.at(self.step);
        self.opt.step(model.params_mut(), &mut grads, lr);
        model.params_mut().round_to_f32();
        self.step += 1;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (SemanticDecoder, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DecoderConfig {
            width: 16,
            layers: 1,
            heads: 2,
            soft_tokens: 2,
            max_len: 16,
            time_features: 8,
            ..DecoderConfig::new(16, 4)
        };
        let mut m = SemanticDecoder::new(cfg, &mut rng);
        m.params_mut().perturb(&mut rng, 0.2);
        m.params_mut().round_to_f32();
        (m, rng)
    }

    fn batch(rng: &mut ChaCha8Rng) -> DecoderBatch {
        DecoderBatch {
            prefixes: vec![vec![1, 2, 3], vec![4, 5, 6]],
            continuations: vec![vec![7, 8, 9, 10], vec![11, 12, 13, 14]],
            z: normal_mat(rng, 2, 4, 1.0),
            lambdas: vec![-1.0, 2.0],
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut m, mut rng) = tiny();
        let b = batch(&mut rng);
        let (_, grads) = m.batch_loss(&b).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in 0..m.params().len() {
            let (r, c) = m.params().values()[pi].dim();
            for idx in [(0, 0), (r - 1, c - 1), (r / 2, c / 3)] {
                let orig = m.params().values()[pi][idx];
                m.params_mut().values_mut()[pi][idx] = orig + h;
                let up = m.batch_loss(&b).unwrap().0;
                m.params_mut().values_mut()[pi][idx] = orig - h;
                let down = m.batch_loss(&b).unwrap().0;
                m.params_mut().values_mut()[pi][idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = grads[pi][idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(rel);
                assert!(rel < 1e-3, "{}: {a} vs {fd}", m.params().names()[pi]);
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn only_continuation_positions_are_labeled() {
        let t = continuation_targets(3, 2, &[vec![7, 8, 9], vec![1, 2, 3]]);
        let seq = 3 + 2 + 2;
        assert_eq!(t.len(), 2 * seq);
        for i in 0..2 {
            assert!(t[i * seq..i * seq + 4].iter().all(|x| x.is_none()));
        }
        assert_eq!(&t[4..7], &[Some(7), Some(8), Some(9)]);
        assert_eq!(&t[seq + 4..], &[Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn relabeling_the_last_token_changes_the_loss() {
        let (m, mut rng) = tiny();
        let b = batch(&mut rng);
        let base = m.batch_loss(&b).unwrap().0;
        let mut relabeled = b.clone();
        relabeled.continuations[0][3] = 0;
        assert_ne!(m.batch_loss(&relabeled).unwrap().0, base);
    }

    #[test]
    fn causal() {
        let (m, mut rng) = tiny();
        let z = normal_mat(&mut rng, 1, 4, 1.0);
        let soft = m.soft_prompt(&z, &[0.0]).unwrap();
        let g1 = m.next_logits(&[vec![1, 2]], &soft, &[vec![3, 4]]).unwrap();
        let g2 = m.next_logits(&[vec![1, 2]], &soft, &[vec![3, 4, 9]]).unwrap();
        let g0 = m.next_logits(&[vec![1, 2]], &soft, &[vec![3]]).unwrap();
        // logits at a position depend only on earlier tokens: appending a
        // token leaves the previous last-position logits unchanged
        let graph = Graph::new();
        let p = m.params.bind(&graph);
        let all = m.logits(&p, &[vec![1, 2]], graph.leaf(soft.clone()), &[vec![3, 4, 9]]).to_owned();
        for j in 0..16 {
            assert!((all[[4, j]] - g0[[0, j]]).abs() < 1e-12);
            assert!((all[[5, j]] - g1[[0, j]]).abs() < 1e-12);
            assert!((all[[6, j]] - g2[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_deterministic_and_full_noise_ignores_proposal() {
        let (m, mut rng) = tiny();
        let x = normal_mat(&mut rng, 2, 4, 1.0);
        let pre = vec![vec![1, 2], vec![3, 4]];
        let a = m.generate(&pre, Some(&x), 0.05, 5, &[1, 2]).unwrap();
        assert_eq!(a, m.generate(&pre, Some(&x), 0.05, 5, &[1, 2]).unwrap());
        assert!(a.iter().all(|s| s.len() == 5));
        let full = m.generate(&pre, Some(&x), 1.0, 5, &[1, 2]).unwrap();
        let none = m.generate(&pre, None, 1.0, 5, &[1, 2]).unwrap();
        assert_eq!(full, none);
        assert!(m.generate(&pre, Some(&x), 1.5, 5, &[1, 2]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, _) = tiny();
        let c = m.to_checkpoint();
        let back = SemanticDecoder::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params().values(), m.params().values());
        assert_eq!(back.to_checkpoint().to_bytes(), c.to_bytes());
    }
}
