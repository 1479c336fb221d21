//! Mini-batch SAM training over precomputed features with checkpoint
//! selection by zero-shot mAP@5.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    geometry_features, ByteCursor, FeatureRecord, FeatureStore, Manifest, Splits,
};
use crate::head::{
    batchnorm_forward, head_embed, head_loss_grads, ArcFaceConfig, BatchNormState, BnMode,
    HeadParams, GEOMETRY_DIMS,
};
use crate::optim::{sam_step, AdamWConfig, AdamWState, SamConfig, ScheduleSpec};
use crate::retrieval::{index_from_store, leave_one_out_map};
use crate::rng::SplitMix64;

pub const EVAL_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_epochs: u32,
    pub seed: u64,
    pub eval_every: u32,
    pub dim_out: usize,
    pub schedule: ScheduleSpec,
    pub arcface: ArcFaceConfig,
    pub sam: SamConfig,
    pub adamw: AdamWConfig,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            total_epochs: 1000,
            seed: 0,
            eval_every: 10,
            dim_out: crate::head::DEFAULT_EMBED_DIM,
            schedule: ScheduleSpec::default(),
            arcface: ArcFaceConfig::default(),
            sam: SamConfig::default(),
            adamw: AdamWConfig::default(),
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.total_epochs < 1 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        self.arcface.validate()?;
        // the schedule spans the configured epochs
        let mut sched = self.schedule;
        sched.total_epochs = self.total_epochs;
        sched.validate()
    }
}

/// Selected training state: parameters, BN running stats (quantized to
/// f32, matching the on-disk format), the config echo, and the score that
/// selected it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub d_in: usize,
    pub d_out: usize,
    pub n_classes: usize,
    pub arcface: ArcFaceConfig,
    pub w_proj: Vec<f32>,
    pub b_proj: Vec<f32>,
    pub w_arc: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub bn_momentum: f32,
    pub bn_epsilon: f32,
    pub config_echo: String,
    pub epoch: u32,
    pub zeroshot_map5: f64,
}

impl Checkpoint {
    /// Snapshot of live (f64) training state. Quantizes to f32 so that
    /// embeddings computed before and after a save/load round-trip are
    /// bit-identical.
    pub fn capture(
        params: &HeadParams,
        bn: &BatchNormState,
        arcface: &ArcFaceConfig,
        config_echo: String,
        epoch: u32,
        zeroshot_map5: f64,
    ) -> Self {
        Self {
            d_in: params.d_in,
            d_out: params.d_out,
            n_classes: params.n_classes,
            arcface: *arcface,
            w_proj: params.w_proj().iter().map(|v| *v as f32).collect(),
            b_proj: params.b_proj().iter().map(|v| *v as f32).collect(),
            w_arc: params.w_arc().iter().map(|v| *v as f32).collect(),
            running_mean: bn.running_mean.iter().map(|v| *v as f32).collect(),
            running_var: bn.running_var.iter().map(|v| *v as f32).collect(),
            bn_momentum: bn.momentum as f32,
            bn_epsilon: bn.epsilon as f32,
            config_echo,
            epoch,
            zeroshot_map5,
        }
    }

    /// Widens the stored tensors back into eval-ready f64 state.
    pub fn to_eval_state(&self) -> (HeadParams, BatchNormState) {
        let mut params = HeadParams::zeros(self.d_in, self.d_out, self.n_classes);
        let proj = self.d_out * self.d_in;
        for (i, v) in self.w_proj.iter().enumerate() {
            params.data[i] = *v as f64;
        }
        for (i, v) in self.b_proj.iter().enumerate() {
            params.data[proj + i] = *v as f64;
        }
        for (i, v) in self.w_arc.iter().enumerate() {
            params.data[proj + self.d_out + i] = *v as f64;
        }
        let bn = BatchNormState {
            running_mean: self.running_mean.iter().map(|v| *v as f64).collect(),
            running_var: self.running_var.iter().map(|v| *v as f64).collect(),
            momentum: self.bn_momentum as f64,
            epsilon: self.bn_epsilon as f64,
            mode: BnMode::Eval,
        };
        (params, bn)
    }
}

// --- checkpoint file (GUIEHEAD) -----------------------------------------

const HEAD_MAGIC: &[u8; 8] = b"GUIEHEAD";
const HEAD_VERSION: u16 = 1;

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.d_in as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.d_out as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.n_classes as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.arcface.scale as f32).to_le_bytes());
    out.extend_from_slice(&(ckpt.arcface.margin as f32).to_le_bytes());
    out.extend_from_slice(&ckpt.bn_momentum.to_le_bytes());
    out.extend_from_slice(&ckpt.bn_epsilon.to_le_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.zeroshot_map5.to_le_bytes());
    for tensor in [
        &ckpt.w_proj,
        &ckpt.b_proj,
        &ckpt.w_arc,
        &ckpt.running_mean,
        &ckpt.running_var,
    ] {
        for v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let echo = ckpt.config_echo.as_bytes();
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = ByteCursor::new(bytes);
    if c.take(8)? != HEAD_MAGIC {
        return Err(Error::Format("bad magic: not a GUIEHEAD file".into()));
    }
    let version = c.u16()?;
    if version != HEAD_VERSION {
        return Err(Error::Format(format!(
            "unsupported GUIEHEAD version {version} (expected {HEAD_VERSION})"
        )));
    }
    let d_in = c.u32()? as usize;
    let d_out = c.u32()? as usize;
    let n_classes = c.u32()? as usize;
    let scale = c.f32()? as f64;
    let margin = c.f32()? as f64;
    let bn_momentum = c.f32()?;
    let bn_epsilon = c.f32()?;
    let epoch = c.u32()?;
    let zeroshot_map5 = c.f64()?;
    let tensor = |len: usize, c: &mut ByteCursor| -> Result<Vec<f32>> {
        let mut t = Vec::with_capacity(len);
        for _ in 0..len {
            t.push(c.f32()?);
        }
        Ok(t)
    };
    let w_proj = tensor(d_out * d_in, &mut c)?;
    let b_proj = tensor(d_out, &mut c)?;
    let w_arc = tensor(n_classes * d_out, &mut c)?;
    let running_mean = tensor(d_in, &mut c)?;
    let running_var = tensor(d_in, &mut c)?;
    let echo_len = c.u32()? as usize;
    let config_echo = std::str::from_utf8(c.take(echo_len)?)
        .map_err(|e| Error::Format(format!("invalid UTF-8 config echo: {e}")))?
        .to_string();
    if c.remaining() != 0 {
        return Err(Error::Format(format!(
            "trailing bytes: {} unread after config echo",
            c.remaining()
        )));
    }
    Ok(Checkpoint {
        d_in,
        d_out,
        n_classes,
        arcface: ArcFaceConfig { scale, margin },
        w_proj,
        b_proj,
        w_arc,
        running_mean,
        running_var,
        bn_momentum,
        bn_epsilon,
        config_echo,
        epoch,
        zeroshot_map5,
    })
}

// --- training data assembly ---------------------------------------------

/// Train records resolved against the store: head inputs
/// (feature ++ geometry) and contiguous label indices.
pub struct TrainData {
    pub inputs: Vec<f64>, // n x d_in
    pub labels: Vec<usize>,
    pub n: usize,
    pub d_in: usize,
}

/// Maps class ids (ascending) to contiguous indices.
pub fn label_index(manifest: &Manifest) -> HashMap<u32, usize> {
    manifest
        .class_ids()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect()
}

/// Concatenates the stored feature with the geometry triple.
pub fn head_input(record: &FeatureRecord) -> Result<Vec<f64>> {
    let geo = geometry_features(record.width, record.height)?;
    let mut x: Vec<f64> = record.feature.iter().map(|v| *v as f64).collect();
    x.extend_from_slice(&geo);
    Ok(x)
}

pub fn build_train_data(
    store: &FeatureStore,
    manifest: &Manifest,
    labels: &HashMap<u32, usize>,
) -> Result<TrainData> {
    let d_in = store.dimension as usize + GEOMETRY_DIMS;
    let by_id: HashMap<&str, &FeatureRecord> = store
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let mut inputs = Vec::with_capacity(manifest.len() * d_in);
    let mut label_vec = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let record = by_id.get(e.image_id.as_str()).ok_or_else(|| {
            Error::Domain(format!("manifest entry {:?} missing from store", e.image_id))
        })?;
        let label = *labels.get(&e.class_id).ok_or_else(|| {
            Error::Domain(format!(
                "class {} of entry {:?} not in the label index",
                e.class_id, e.image_id
            ))
        })?;
        inputs.extend(head_input(record)?);
        label_vec.push(label);
    }
    Ok(TrainData { inputs, labels: label_vec, n: manifest.len(), d_in })
}

// --- epoch loop ----------------------------------------------------------

/// One pass over the training set: shuffle, chunk by `batch_size` (a final
/// chunk of one record is dropped; BatchNorm is undefined there), one SAM
/// step per batch with both gradient evaluations on the same batch and the
/// BatchNorm output fixed from the first forward. Returns the mean
/// unperturbed loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    data: &TrainData,
    params: &mut HeadParams,
    bn: &mut BatchNormState,
    opt: &mut AdamWState,
    arcface: &ArcFaceConfig,
    sam: &SamConfig,
    batch_size: usize,
    lr: f64,
    rng: &mut SplitMix64,
) -> Result<f64> {
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be >= 2".into()));
    }
    let mut order: Vec<usize> = (0..data.n).collect();
    rng.shuffle(&mut order);

    let d_in = data.d_in;
    bn.mode = BnMode::Train;
    let mut losses = Vec::new();
    for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
        if chunk.len() < 2 {
            break; // trailing singleton dropped
        }
        let b = chunk.len();
        let mut x = Vec::with_capacity(b * d_in);
        let mut labels = Vec::with_capacity(b);
        for &i in chunk {
            x.extend_from_slice(&data.inputs[i * d_in..(i + 1) * d_in]);
            labels.push(data.labels[i]);
        }
        // BatchNorm has no learnable parameters: its output is computed once
        // and shared by both SAM gradient evaluations.
        let (x_hat, _) = batchnorm_forward(&x, b, bn)?;

        let shape = (params.d_in, params.d_out, params.n_classes);
        let loss = sam_step(
            &mut params.data,
            |flat| {
                let view = HeadParams {
                    d_in: shape.0,
                    d_out: shape.1,
                    n_classes: shape.2,
                    data: flat.to_vec(),
                };
                let (loss, grads, _) =
                    head_loss_grads(&x_hat, b, &labels, &view, arcface, false)?;
                Ok((loss, grads))
            },
            opt,
            sam,
            lr,
        )
        .map_err(|e| match e {
            Error::Optimizer(msg) if msg.contains("non-finite") => {
                Error::Divergence { batch: batch_idx }
            }
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Divergence { batch: batch_idx });
        }
        losses.push(loss);
    }
    if losses.is_empty() {
        return Err(Error::Config("no trainable batches (need >= 2 records)".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

// --- evaluation and fit ---------------------------------------------------

/// Embeds every store record through a checkpoint (eval-mode BN), yielding
/// a unit-embedding store of the checkpoint's output dimension.
pub fn embed_store(ckpt: &Checkpoint, store: &FeatureStore) -> Result<FeatureStore> {
    let (params, bn) = ckpt.to_eval_state();
    if store.dimension as usize + GEOMETRY_DIMS != ckpt.d_in {
        return Err(Error::Domain(format!(
            "store dimension {} + {GEOMETRY_DIMS} geometry dims != checkpoint d_in {}",
            store.dimension, ckpt.d_in
        )));
    }
    let mut records = Vec::with_capacity(store.records.len());
    for r in &store.records {
        let x = head_input(r)?;
        let e = head_embed(&x, &params, &bn)?;
        records.push(FeatureRecord {
            image_id: r.image_id.clone(),
            class_id: r.class_id,
            width: r.width,
            height: r.height,
            category: r.category,
            feature: e.into_iter().map(|v| v as f32).collect(),
        });
    }
    FeatureStore::new(ckpt.d_out as u32, records)
}

/// Leave-one-out zero-shot mAP@5 of a checkpoint over the given manifest's
/// records.
pub fn evaluate_zeroshot(
    ckpt: &Checkpoint,
    store: &FeatureStore,
    manifest: &Manifest,
) -> Result<f64> {
    let ids: std::collections::HashSet<&str> =
        manifest.entries.iter().map(|e| e.image_id.as_str()).collect();
    let subset: Vec<FeatureRecord> = store
        .records
        .iter()
        .filter(|r| ids.contains(r.image_id.as_str()))
        .cloned()
        .collect();
    if subset.len() != ids.len() {
        return Err(Error::Domain(
            "zero-shot manifest references records missing from the store".into(),
        ));
    }
    let subset_store = FeatureStore::new(store.dimension, subset)?;
    let embedded = embed_store(ckpt, &subset_store)?;
    let index = index_from_store(&embedded)?;
    leave_one_out_map(&index, EVAL_K)
}

/// Trains for `config.total_epochs` epochs, evaluating zero-shot mAP@5
/// every `eval_every` epochs, and returns the best checkpoint (ties go to
/// the earlier epoch). Logs CSV lines:
/// `train,<epoch>,<lr>,<mean_loss>` and `eval,<epoch>,<map5>`.
pub fn fit(
    store: &FeatureStore,
    splits: &Splits,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    config.validate()?;
    if splits.zeroshot_test.is_empty() {
        return Err(Error::Config(
            "zero-shot test split is empty: checkpoint selection needs it".into(),
        ));
    }
    let labels = label_index(&splits.train);
    let data = build_train_data(store, &splits.train, &labels)?;
    let n_classes = labels.len();
    let d_in = data.d_in;

    let config_echo = serde_json::to_string(config).expect("config serializes");

    let mut master = SplitMix64::new(config.seed);
    let param_seed = master.next_u64();
    let mut params = HeadParams::init(d_in, config.dim_out, n_classes, param_seed);
    let mut bn = BatchNormState::new(d_in);
    bn.momentum = config.bn_momentum;
    bn.epsilon = config.bn_epsilon;
    let mut opt = AdamWState::new(params.data.len(), config.adamw);

    let mut schedule = config.schedule;
    schedule.total_epochs = config.total_epochs;

    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=config.total_epochs {
        let lr = crate::optim::lr_at(epoch - 1, &schedule)?;
        let epoch_seed = master.next_u64();
        let mut rng = SplitMix64::new(epoch_seed);
        let mean_loss = train_epoch(
            &data,
            &mut params,
            &mut bn,
            &mut opt,
            &config.arcface,
            &config.sam,
            config.batch_size,
            lr,
            &mut rng,
        )?;
        writeln!(log, "train,{epoch},{lr:.6},{mean_loss:.6}")?;

        if epoch % config.eval_every == 0 || epoch == config.total_epochs {
            bn.mode = BnMode::Eval;
            let candidate = Checkpoint::capture(
                &params,
                &bn,
                &config.arcface,
                config_echo.clone(),
                epoch,
                0.0,
            );
            let map5 = evaluate_zeroshot(&candidate, store, &splits.zeroshot_test)?;
            bn.mode = BnMode::Train;
            writeln!(log, "eval,{epoch},{map5:.6}")?;
            let candidate = Checkpoint { zeroshot_map5: map5, ..candidate };
            let better = match &best {
                None => true,
                Some(b) => map5 > b.zeroshot_map5,
            };
            if better {
                best = Some(candidate);
            }
        }
    }
    Ok(best.expect("at least the final epoch is evaluated"))
}

/// Untrained baseline: freshly initialized head with identity BN stats,
/// captured exactly as `fit` would at epoch zero.
pub fn init_checkpoint(
    store_dim: usize,
    config: &TrainConfig,
    n_classes: usize,
) -> Checkpoint {
    let d_in = store_dim + GEOMETRY_DIMS;
    let mut master = SplitMix64::new(config.seed);
    let param_seed = master.next_u64();
    let params = HeadParams::init(d_in, config.dim_out, n_classes, param_seed);
    let mut bn = BatchNormState::new(d_in);
    bn.momentum = config.bn_momentum;
    bn.epsilon = config.bn_epsilon;
    bn.mode = BnMode::Eval;
    let echo = serde_json::to_string(config).expect("config serializes");
    Checkpoint::capture(&params, &bn, &config.arcface, echo, 0, 0.0)
}
