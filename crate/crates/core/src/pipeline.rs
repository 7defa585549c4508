//! Guided learning from a frozen dense teacher, then self-training on the
//! target network's own predictions, with a best-snapshot and drift guard.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::clip_adapt::{conv_meta, decode_logits, get_conv, push_conv, Segmenter, ToyBackbone, DEFAULT_TAU};
use crate::container::Container;
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::metrics::ConfusionMatrix;
use crate::seed;
use crate::tensor::{
    backward_conv2d, conv2d, cross_entropy, relu, relu_backward, sgd_update, ConvParams, Tensor4,
};
use crate::textbank::{bank_as_conv, ClassifierBank};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Setting {
    /// Ground truth is available for the listed seen classes only.
    Transductive { seen: BTreeSet<u8> },
    AnnotationFree,
}

impl Setting {
    pub fn name(&self) -> &'static str {
        match self {
            Setting::Transductive { .. } => "transductive",
            Setting::AnnotationFree => "annotation_free",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Guided,
    SelfTrain,
    Halted,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Guided => "guided",
            Phase::SelfTrain => "self",
            Phase::Halted => "halted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub guided_iters: usize,
    pub self_iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub setting: Setting,
    /// A participating class halts self-training when its share falls below this fraction of its start share.
    pub share_floor: f64,
    /// Start share a class needs before the drift rule watches it.
    pub share_bar: f64,
    pub check_interval: usize,
    /// Trailing dataset entries held out for model selection.
    pub probe_count: usize,
    /// Width of the target network's hidden layers.
    pub hidden: usize,
    /// Teacher temperature, used by callers that build the teacher from files.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            guided_iters: 300,
            self_iters: 300,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            setting: Setting::AnnotationFree,
            share_floor: 0.2,
            share_bar: 0.01,
            check_interval: 50,
            probe_count: 8,
            hidden: 8,
            tau: DEFAULT_TAU,
        }
    }
}

const DEFAULT_TOTAL_ITERS: usize = 1000;

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{}`: cannot parse `{}`: {}", key, value, e)))
}

fn parse_ids(value: &str) -> Result<BTreeSet<u8>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value::<u8>("seen", s))
        .collect()
}

impl TrainConfig {
    /// Read flat `key=value` text. `iters` gives the total budget: guided
    /// learning takes a tenth of it (all of it without annotations) unless
    /// `guided_iters`/`self_iters` are given. A transductive run without a
    /// `seen` key uses `default_seen`.
    pub fn from_kv(text: &str, default_seen: &BTreeSet<u8>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut iters: Option<usize> = None;
        let mut guided: Option<usize> = None;
        let mut selft: Option<usize> = None;
        let mut setting = "annotation_free".to_string();
        let mut seen: Option<BTreeSet<u8>> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{}`", line)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "iters" => iters = Some(parse_value(k, v)?),
                "guided_iters" => guided = Some(parse_value(k, v)?),
                "self_iters" => selft = Some(parse_value(k, v)?),
                "lr" => cfg.lr = parse_value(k, v)?,
                "momentum" => cfg.momentum = parse_value(k, v)?,
                "batch_size" => cfg.batch_size = parse_value(k, v)?,
                "seed" => cfg.seed = parse_value(k, v)?,
                "setting" => setting = v.to_string(),
                "seen" => seen = Some(parse_ids(v)?),
                "share_floor" => cfg.share_floor = parse_value(k, v)?,
                "share_bar" => cfg.share_bar = parse_value(k, v)?,
                "check_interval" => cfg.check_interval = parse_value(k, v)?,
                "probe_count" => cfg.probe_count = parse_value(k, v)?,
                "hidden" => cfg.hidden = parse_value(k, v)?,
                "tau" => cfg.tau = parse_value(k, v)?,
                other => return Err(Error::Config(format!("unknown config key `{}`", other))),
            }
        }
        cfg.setting = match setting.as_str() {
            "annotation_free" => Setting::AnnotationFree,
            "transductive" => Setting::Transductive {
                seen: seen.unwrap_or_else(|| default_seen.clone()),
            },
            other => return Err(Error::Config(format!("unknown setting `{}`", other))),
        };
        let free = cfg.setting == Setting::AnnotationFree;
        let (g, s) = match (guided, selft) {
            (Some(g), Some(s)) => {
                if let Some(t) = iters.filter(|&t| t != g + s) {
                    return Err(Error::Config(format!("iters={} but guided+self={}", t, g + s)));
                }
                (g, s)
            }
            (Some(g), None) => match iters {
                Some(t) => (g, t.checked_sub(g).ok_or_else(|| Error::Config("guided_iters exceeds iters".into()))?),
                None if free => (g, 0),
                None => (g, 9 * g),
            },
            (None, Some(s)) => match iters {
                Some(t) => (t.checked_sub(s).ok_or_else(|| Error::Config("self_iters exceeds iters".into()))?, s),
                None => ((s / 9).max(1), s),
            },
            (None, None) => {
                let t = iters.unwrap_or(DEFAULT_TOTAL_ITERS);
                if free {
                    (t, 0)
                } else {
                    let g = (t / 10).max(1);
                    (g, t - g)
                }
            }
        };
        cfg.guided_iters = g;
        cfg.self_iters = s;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved configuration in the same `key=value` syntax.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "iters={}", self.guided_iters + self.self_iters).unwrap();
        writeln!(s, "guided_iters={}", self.guided_iters).unwrap();
        writeln!(s, "self_iters={}", self.self_iters).unwrap();
        writeln!(s, "lr={}", self.lr).unwrap();
        writeln!(s, "momentum={}", self.momentum).unwrap();
        writeln!(s, "batch_size={}", self.batch_size).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "setting={}", self.setting.name()).unwrap();
        if let Setting::Transductive { seen } = &self.setting {
            let ids: Vec<String> = seen.iter().map(u8::to_string).collect();
            writeln!(s, "seen={}", ids.join(",")).unwrap();
        }
        writeln!(s, "share_floor={}", self.share_floor).unwrap();
        writeln!(s, "share_bar={}", self.share_bar).unwrap();
        writeln!(s, "check_interval={}", self.check_interval).unwrap();
        writeln!(s, "probe_count={}", self.probe_count).unwrap();
        writeln!(s, "hidden={}", self.hidden).unwrap();
        writeln!(s, "tau={}", self.tau).unwrap();
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.guided_iters == 0 {
            return Err(Error::Config("guided_iters must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.batch_size == 0 || self.check_interval == 0 || self.probe_count == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "batch_size, check_interval, probe_count and hidden must be >= 1".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.share_floor) || !(0.0..=1.0).contains(&self.share_bar) {
            return Err(Error::Config("share_floor and share_bar must lie in [0,1]".into()));
        }
        if let Setting::Transductive { seen } = &self.setting {
            if seen.is_empty() {
                return Err(Error::Config("transductive setting needs seen classes".into()));
            }
            if seen.contains(&IGNORE_INDEX) {
                return Err(Error::Config("ignore index cannot be a seen class".into()));
            }
        }
        Ok(())
    }
}

/// Combine ground truth with dense predictions according to the setting.
pub fn compose_pseudo_labels(gt: Option<&LabelMap>, dense_pred: &LabelMap, setting: &Setting) -> Result<LabelMap> {
    match setting {
        Setting::AnnotationFree => {
            if let Some(g) = gt {
                if !g.same_size(dense_pred) {
                    return Err(Error::Data("ground truth and prediction sizes differ".into()));
                }
            }
            Ok(dense_pred.clone())
        }
        Setting::Transductive { seen } => {
            let gt = gt.ok_or_else(|| Error::Data("transductive labels need ground truth".into()))?;
            if !gt.same_size(dense_pred) {
                return Err(Error::Data(format!(
                    "ground truth {}x{} vs prediction {}x{}",
                    gt.height(),
                    gt.width(),
                    dense_pred.height(),
                    dense_pred.width()
                )));
            }
            let data = gt
                .data()
                .iter()
                .zip(dense_pred.data())
                .map(|(&g, &p)| if seen.contains(&g) { g } else { p })
                .collect();
            LabelMap::new(gt.height(), gt.width(), data)
        }
    }
}

/// Trainable conv stack followed by the bank as a fixed 1x1 classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub backbone: ToyBackbone,
    pub classifier: ConvParams,
    pub text_rows: usize,
    pub background_trainable: bool,
    /// Fixed `(mean, std)` standardisation applied to inputs before the first layer.
    pub input_norm: (f64, f64),
}

pub const DEFAULT_INPUT_NORM: (f64, f64) = (0.5, 0.25);

struct Forward {
    /// Input to each backbone layer.
    inputs: Vec<Tensor4>,
    /// Output of each backbone layer before the following ReLU.
    outputs: Vec<Tensor4>,
    logits: Tensor4,
}

/// Gradients in parameter order: every layer's (weights, bias), then the background row.
pub struct ModelGrads {
    pub layers: Vec<(Tensor4, Vec<f64>)>,
    pub background: Option<Vec<f64>>,
}

fn he_conv(out_c: usize, in_c: usize, k: usize, dilation: usize, rng: &mut impl Rng) -> Result<ConvParams> {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let data = (0..out_c * in_c * k * k)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ConvParams::new(
        Tensor4::from_vec([out_c, in_c, k, k], data)?,
        vec![0.0; out_c],
        1,
        dilation,
        dilation * (k - 1) / 2,
    )
}

impl TargetModel {
    /// `in_channels -> hidden (3x3) -> hidden (3x3, dilation 2) -> bank dim (1x1)`, then the bank.
    pub fn new(in_channels: usize, hidden: usize, bank: &ClassifierBank, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, "target/init");
        let layers = vec![
            he_conv(hidden, in_channels, 3, 1, &mut rng)?,
            he_conv(hidden, hidden, 3, 2, &mut rng)?,
            he_conv(bank.dim(), hidden, 1, 1, &mut rng)?,
        ];
        Ok(Self {
            backbone: ToyBackbone::new(layers)?,
            classifier: bank_as_conv(bank),
            text_rows: bank.class_count(),
            background_trainable: bank.background.as_ref().is_some_and(|b| b.trainable),
            input_norm: DEFAULT_INPUT_NORM,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn has_background(&self) -> bool {
        self.num_labels() > self.text_rows
    }

    fn forward_cached(&self, images: &Tensor4) -> Result<Forward> {
        let mut inputs = Vec::with_capacity(self.backbone.layers.len());
        let mut outputs = Vec::with_capacity(self.backbone.layers.len());
        let (mean, std) = self.input_norm;
        let mut x = images.clone();
        x.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            let input = if i == 0 { x.clone() } else { relu(&x) };
            x = conv2d(&input, layer)?;
            inputs.push(input);
            outputs.push(x.clone());
        }
        let logits = conv2d(&x, &self.classifier)?;
        Ok(Forward { inputs, outputs, logits })
    }

    pub fn logits(&self, images: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward_cached(images)?.logits)
    }

    /// Argmax labels and softmax confidences.
    pub fn segment(&self, images: &Tensor4) -> Result<(Vec<LabelMap>, Vec<crate::labels::ConfidenceMap>)> {
        decode_logits(&self.logits(images)?)
    }

    fn backward(&self, fwd: &Forward, dlogits: &Tensor4) -> Result<ModelGrads> {
        let features = fwd.outputs.last().expect("non-empty");
        let cls = backward_conv2d(features, &self.classifier, dlogits)?;
        let background = if self.has_background() && self.background_trainable {
            let dim = self.classifier.in_channels();
            let start = self.text_rows * dim;
            Some(cls.weights.data()[start..start + dim].to_vec())
        } else {
            None
        };
        let mut grad = cls.input;
        let n = self.backbone.layers.len();
        let mut layers = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let g = backward_conv2d(&fwd.inputs[i], &self.backbone.layers[i], &grad)?;
            layers.push((g.weights, g.bias));
            if i > 0 {
                grad = relu_backward(&fwd.outputs[i - 1], &g.input)?;
            }
        }
        layers.reverse();
        Ok(ModelGrads { layers, background })
    }

    /// Loss against `labels` (ignore 255) and parameter gradients.
    pub fn loss_and_grads(&self, images: &Tensor4, labels: &[LabelMap]) -> Result<(f64, ModelGrads)> {
        let fwd = self.forward_cached(images)?;
        let (loss, dlogits) = cross_entropy(&fwd.logits, labels, IGNORE_INDEX)?;
        Ok((loss, self.backward(&fwd, &dlogits)?))
    }

    /// Lengths of the trainable parameter tensors, in gradient order.
    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for l in &self.backbone.layers {
            sizes.push(l.weights.data().len());
            sizes.push(l.bias.len());
        }
        if self.has_background() && self.background_trainable {
            sizes.push(self.classifier.in_channels());
        }
        sizes
    }

    /// Apply one momentum-SGD step; `velocity` follows [`Self::param_sizes`].
    pub fn apply_grads(&mut self, grads: &ModelGrads, lr: f64, momentum: f64, velocity: &mut [Vec<f64>]) -> Result<()> {
        let mut v = velocity.iter_mut();
        let mut next = || v.next().ok_or_else(|| Error::Config("velocity buffers do not match model".into()));
        for (layer, (gw, gb)) in self.backbone.layers.iter_mut().zip(&grads.layers) {
            sgd_update(layer.weights.data_mut(), gw.data(), lr, momentum, next()?)?;
            sgd_update(&mut layer.bias, gb, lr, momentum, next()?)?;
        }
        if let Some(gbg) = &grads.background {
            let dim = self.classifier.in_channels();
            let start = self.text_rows * dim;
            let row = &mut self.classifier.weights.data_mut()[start..start + dim];
            sgd_update(row, gbg, lr, momentum, next()?)?;
        }
        Ok(())
    }

    /// The text-derived classifier rows, flattened.
    pub fn text_weights(&self) -> &[f64] {
        &self.classifier.weights.data()[..self.text_rows * self.classifier.in_channels()]
    }

    pub fn to_container(&self, meta_extra: serde_json::Value) -> Container {
        let layers: Vec<_> = self.backbone.layers.iter().map(conv_meta).collect();
        let mut c = Container::new(
            "snapshot",
            json!({
                "layers": layers,
                "text_rows": self.text_rows,
                "background_trainable": self.background_trainable,
                "input_norm": [self.input_norm.0, self.input_norm.1],
                "run": meta_extra,
            }),
        );
        for (i, l) in self.backbone.layers.iter().enumerate() {
            push_conv(&mut c, &format!("backbone.{}", i), l);
        }
        push_conv(&mut c, "classifier", &self.classifier);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("snapshot")?;
        let metas = c.meta["layers"]
            .as_array()
            .ok_or_else(|| Error::Data("snapshot header lacks `layers`".into()))?;
        let layers = metas
            .iter()
            .enumerate()
            .map(|(i, m)| get_conv(c, &format!("backbone.{}", i), m))
            .collect::<Result<Vec<_>>>()?;
        let cls_meta = json!({"stride": 1, "dilation": 1, "padding": 0});
        let classifier = get_conv(c, "classifier", &cls_meta)?;
        let text_rows = c.meta["text_rows"]
            .as_u64()
            .ok_or_else(|| Error::Data("snapshot header lacks `text_rows`".into()))? as usize;
        let model = Self {
            backbone: ToyBackbone::new(layers)?,
            classifier,
            text_rows,
            background_trainable: c.meta["background_trainable"].as_bool().unwrap_or(false),
            input_norm: (
                c.meta["input_norm"][0].as_f64().unwrap_or(DEFAULT_INPUT_NORM.0),
                c.meta["input_norm"][1].as_f64().unwrap_or(DEFAULT_INPUT_NORM.1),
            ),
        };
        if model.backbone.out_channels() != model.classifier.in_channels() || text_rows > model.num_labels() {
            return Err(Error::Data("snapshot classifier does not fit its backbone".into()));
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path, meta_extra: serde_json::Value) -> Result<()> {
        self.to_container(meta_extra).write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn argmax_labels(logits: &Tensor4) -> Vec<LabelMap> {
    let [n, k, h, w] = logits.dims();
    let hw = h * w;
    (0..n)
        .map(|b| {
            let data = (0..hw)
                .map(|i| {
                    let mut best = 0;
                    let mut best_v = logits.data()[b * k * hw + i];
                    for c in 1..k {
                        let v = logits.data()[(b * k + c) * hw + i];
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, data).expect("sized from logits")
        })
        .collect()
}

impl Segmenter for TargetModel {
    fn num_labels(&self) -> usize {
        TargetModel::num_labels(self)
    }

    fn predict(&self, images: &Tensor4) -> Result<Vec<LabelMap>> {
        Ok(argmax_labels(&self.logits(images)?))
    }
}

/// Training images drawn for one iteration.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor4,
    /// Dataset labels, present in the transductive setting.
    pub gt: Option<Vec<LabelMap>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub model: TargetModel,
    pub iter: usize,
    pub probe_miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub phase: Phase,
    pub loss: f64,
    pub probe_miou: Option<f64>,
    pub shares: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub num_labels: usize,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// `iter,phase,loss,probe_miou,share_0..`; probe columns are empty between probes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,phase,loss,probe_miou");
        for c in 0..self.num_labels {
            write!(s, ",share_{}", c).unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{},{}", r.iter, r.phase.name(), r.loss).unwrap();
            match r.probe_miou {
                Some(m) => write!(s, ",{}", m).unwrap(),
                None => s.push(','),
            }
            for c in 0..self.num_labels {
                match &r.shares {
                    Some(v) => write!(s, ",{}", v[c]).unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub iter: usize,
    pub phase: Phase,
    pub model: TargetModel,
    pub velocity: Vec<Vec<f64>>,
    /// Probe shares when self-training began.
    pub start_shares: Option<Vec<f64>>,
    pub best: Option<Snapshot>,
    pub log: TrainLog,
}

impl TrainState {
    pub fn new(model: TargetModel) -> Self {
        let velocity = model.param_sizes().into_iter().map(|n| vec![0.0; n]).collect();
        let num_labels = model.num_labels();
        Self {
            iter: 0,
            phase: Phase::Guided,
            model,
            velocity,
            start_shares: None,
            best: None,
            log: TrainLog {
                num_labels,
                rows: Vec::new(),
            },
        }
    }

    /// Keep the current model if its probe score beats the best so far.
    pub fn offer_snapshot(&mut self, probe_miou: f64) -> bool {
        if self.best.as_ref().is_none_or(|b| probe_miou > b.probe_miou) {
            self.best = Some(Snapshot {
                model: self.model.clone(),
                iter: self.iter,
                probe_miou,
            });
            true
        } else {
            false
        }
    }
}

fn train_on(state: &mut TrainState, batch: &Batch, labels: &[LabelMap], cfg: &TrainConfig) -> Result<f64> {
    let (loss, grads) = state.model.loss_and_grads(&batch.images, labels)?;
    state
        .model
        .apply_grads(&grads, cfg.lr, cfg.momentum, &mut state.velocity)?;
    state.iter += 1;
    state.log.rows.push(LogRow {
        iter: state.iter,
        phase: state.phase,
        loss,
        probe_miou: None,
        shares: None,
    });
    Ok(loss)
}

fn compose_batch(batch: &Batch, preds: &[LabelMap], setting: &Setting) -> Result<Vec<LabelMap>> {
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| compose_pseudo_labels(batch.gt.as_ref().map(|g| &g[i]), p, setting))
        .collect()
}

/// One step on teacher predictions `dense_preds` (one per batch image).
/// Returns the loss and the labels trained on.
pub fn guided_step(
    state: &mut TrainState,
    batch: &Batch,
    dense_preds: &[LabelMap],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<LabelMap>)> {
    if state.phase != Phase::Guided {
        return Err(Error::Config(format!("guided step in phase {}", state.phase.name())));
    }
    let labels = compose_batch(batch, dense_preds, &cfg.setting)?;
    let loss = train_on(state, batch, &labels, cfg)?;
    Ok((loss, labels))
}

/// One step on the model's own argmax, taken from the same forward pass as the loss.
pub fn self_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<(f64, Vec<LabelMap>)> {
    if state.phase != Phase::SelfTrain {
        return Err(Error::Config(format!("self-training step in phase {}", state.phase.name())));
    }
    let fwd = state.model.forward_cached(&batch.images)?;
    let own = argmax_labels(&fwd.logits);
    let labels = compose_batch(batch, &own, &cfg.setting)?;
    let (loss, dlogits) = cross_entropy(&fwd.logits, &labels, IGNORE_INDEX)?;
    let grads = state.model.backward(&fwd, &dlogits)?;
    state
        .model
        .apply_grads(&grads, cfg.lr, cfg.momentum, &mut state.velocity)?;
    state.iter += 1;
    state.log.rows.push(LogRow {
        iter: state.iter,
        phase: state.phase,
        loss,
        probe_miou: None,
        shares: None,
    });
    Ok((loss, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftDecision {
    Continue,
    Halt,
}

/// Halt when a class that held more than `share_bar` of probe pixels at the
/// start now holds less than `share_floor` times its start share.
pub fn drift_check(start: &[f64], current: &[f64], share_floor: f64, share_bar: f64) -> DriftDecision {
    let collapsed = start
        .iter()
        .zip(current)
        .any(|(&s, &c)| s > share_bar && c < share_floor * s);
    if collapsed {
        DriftDecision::Halt
    } else {
        DriftDecision::Continue
    }
}

/// Fraction of probe pixels predicted as each label.
pub fn label_shares(preds: &[LabelMap], num_labels: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_labels];
    let mut total = 0u64;
    for p in preds {
        for &l in p.data() {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Observes each training batch with the labels it was trained on.
pub trait TrainObserver {
    fn on_batch(&mut self, iter: usize, phase: Phase, batch: &Batch, labels: &[LabelMap]);
}

struct Probe {
    images: Vec<Tensor4>,
    /// Reference labels the probe mIoU is scored against.
    reference: Vec<LabelMap>,
    classes: BTreeSet<usize>,
}

impl Probe {
    fn score(&self, model: &TargetModel) -> Result<(f64, Vec<f64>)> {
        let mut cm = ConfusionMatrix::new(model.num_labels());
        let mut preds = Vec::with_capacity(self.images.len());
        for (img, reference) in self.images.iter().zip(&self.reference) {
            let p = model.predict(img)?.remove(0);
            cm.accumulate(&p, reference, IGNORE_INDEX)?;
            preds.push(p);
        }
        let miou = match cm.miou_exact(&self.classes) {
            Ok(r) => num_traits::ToPrimitive::to_f64(&r).expect("bounded"),
            Err(Error::UndefinedMetric(_)) => 0.0,
            Err(e) => return Err(e),
        };
        Ok((miou, label_shares(&preds, model.num_labels())))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Best snapshot by probe mIoU.
    pub model: TargetModel,
    pub best_iter: usize,
    pub best_probe_miou: f64,
    /// Best snapshot from the guided phase alone.
    pub guided_best: TargetModel,
    pub final_phase: Phase,
    pub log: TrainLog,
    pub warnings: Vec<String>,
}

fn draw_batch(samples: &[Sample], pool: usize, cfg: &TrainConfig, iter: usize, with_gt: bool) -> Result<Batch> {
    let mut rng = seed::rng_indexed(cfg.seed, "batch", iter as u64);
    let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pool)).collect();
    let images: Vec<Tensor4> = indices.iter().map(|&i| samples[i].image.clone()).collect();
    Ok(Batch {
        images: Tensor4::stack(&images)?,
        gt: with_gt.then(|| indices.iter().map(|&i| samples[i].labels.clone()).collect()),
        indices,
    })
}

/// Full schedule: guided learning, then self-training under the drift guard.
pub fn run(
    cfg: &TrainConfig,
    samples: &[Sample],
    teacher: &dyn Segmenter,
    bank: &ClassifierBank,
    mut observer: Option<&mut dyn TrainObserver>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if samples.len() <= cfg.probe_count {
        return Err(Error::Config(format!(
            "{} samples leave nothing to train on after a probe of {}",
            samples.len(),
            cfg.probe_count
        )));
    }
    if teacher.num_labels() != bank.row_count() {
        return Err(Error::Config(format!(
            "teacher emits {} labels but the bank has {} rows",
            teacher.num_labels(),
            bank.row_count()
        )));
    }
    let mut warnings = Vec::new();
    if cfg.setting == Setting::AnnotationFree && cfg.self_iters > 0 {
        let msg = "self-training without annotations is prone to model drift".to_string();
        log::warn!("{}", msg);
        warnings.push(msg);
    }
    let num_labels = bank.row_count();
    if let Setting::Transductive { seen } = &cfg.setting {
        if seen.iter().any(|&c| c as usize >= num_labels) || seen.len() >= num_labels {
            return Err(Error::Config("seen classes must be a strict subset of the labels".into()));
        }
    }
    let transductive = matches!(cfg.setting, Setting::Transductive { .. });

    let pool = samples.len() - cfg.probe_count;
    let teacher_labels: Vec<LabelMap> = samples
        .iter()
        .map(|s| Ok(teacher.predict(&s.image)?.remove(0)))
        .collect::<Result<_>>()?;

    let probe_samples = &samples[pool..];
    let probe = match &cfg.setting {
        Setting::AnnotationFree => Probe {
            images: probe_samples.iter().map(|s| s.image.clone()).collect(),
            reference: teacher_labels[pool..].to_vec(),
            classes: (0..num_labels).collect(),
        },
        Setting::Transductive { seen } => Probe {
            images: probe_samples.iter().map(|s| s.image.clone()).collect(),
            reference: probe_samples
                .iter()
                .map(|s| {
                    let data = s
                        .labels
                        .data()
                        .iter()
                        .map(|&g| if seen.contains(&g) { g } else { IGNORE_INDEX })
                        .collect();
                    LabelMap::new(s.labels.height(), s.labels.width(), data)
                })
                .collect::<Result<_>>()?,
            classes: seen.iter().map(|&c| c as usize).collect(),
        },
    };

    let in_channels = samples[0].image.channels();
    let model = TargetModel::new(in_channels, cfg.hidden, bank, cfg.seed)?;
    let mut state = TrainState::new(model);

    let probe_now = |state: &mut TrainState| -> Result<Vec<f64>> {
        let (miou, shares) = probe.score(&state.model)?;
        state.offer_snapshot(miou);
        let row = state.log.rows.last_mut().expect("probe follows a step");
        row.probe_miou = Some(miou);
        row.shares = Some(shares.clone());
        Ok(shares)
    };

    for it in 1..=cfg.guided_iters {
        let batch = draw_batch(samples, pool, cfg, it, transductive)?;
        let preds: Vec<LabelMap> = batch.indices.iter().map(|&i| teacher_labels[i].clone()).collect();
        let (_, labels) = guided_step(&mut state, &batch, &preds, cfg)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_batch(state.iter, Phase::Guided, &batch, &labels);
        }
        if it == 1 || it % cfg.check_interval == 0 || it == cfg.guided_iters {
            let shares = probe_now(&mut state)?;
            if it == cfg.guided_iters {
                state.start_shares = Some(shares);
            }
        }
    }
    let guided_best = state.best.clone().expect("probed at least once");

    if cfg.self_iters > 0 {
        state.phase = Phase::SelfTrain;
        let last = cfg.guided_iters + cfg.self_iters;
        for it in cfg.guided_iters + 1..=last {
            let batch = draw_batch(samples, pool, cfg, it, transductive)?;
            let (_, labels) = self_step(&mut state, &batch, cfg)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs.on_batch(state.iter, Phase::SelfTrain, &batch, &labels);
            }
            if (it - cfg.guided_iters).is_multiple_of(cfg.check_interval) || it == last {
                let shares = probe_now(&mut state)?;
                let start = state.start_shares.as_ref().expect("set at end of guided phase");
                // Seen classes get ground truth in every transductive batch, so only the rest are watched.
                let watched: Vec<f64> = start
                    .iter()
                    .enumerate()
                    .map(|(c, &s)| match &cfg.setting {
                        Setting::Transductive { seen } if seen.contains(&(c as u8)) => 0.0,
                        _ => s,
                    })
                    .collect();
                if drift_check(&watched, &shares, cfg.share_floor, cfg.share_bar) == DriftDecision::Halt {
                    let msg = format!("drift detected at iteration {}; restoring best snapshot", it);
                    log::warn!("{}", msg);
                    warnings.push(msg);
                    state.model = state.best.as_ref().expect("snapshot exists").model.clone();
                    state.phase = Phase::Halted;
                    break;
                }
            }
        }
    }

    let best = state.best.clone().expect("probed at least once");
    Ok(RunOutput {
        model: best.model,
        best_iter: best.iter,
        best_probe_miou: best.probe_miou,
        guided_best: guided_best.model,
        final_phase: state.phase,
        log: state.log,
        warnings,
    })
}
