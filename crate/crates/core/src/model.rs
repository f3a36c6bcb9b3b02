//! The fused image+tabular network.
//!
//! Image branch projects precomputed backbone features to a 64-d embedding;
//! the tabular branch is a two-block MLP with an optional input skip; the
//! fusion layer turns the tabular embedding into per-channel (gamma, beta)
//! that modulate the image embedding (z_mod = gamma * z_img + beta), which
//! is then concatenated with the tabular embedding and fed to the head.
//! Both ablation switches (skip, fusion) are plain config flags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    dropout_backward, dropout_forward, layer_norm_backward, layer_norm_forward, relu_backward,
    relu_forward, DropoutMask, LayerNormCache, LayerNormLayer, LinearLayer, Phase,
};
use crate::params::{GradientSet, ParameterSet};
use crate::rng::stream;
use crate::tensor::{
    column_sums, concat_cols, matmul_xw, matmul_xwt, matmul_ytx, split_cols, Tensor,
};

pub const AQI_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classification { num_classes: usize },
    Regression,
}

impl Task {
    pub fn out_dim(&self) -> usize {
        match self {
            Task::Classification { num_classes } => *num_classes,
            Task::Regression => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_img_in: usize,
    pub d_tab_in: usize,
    pub d_emb: usize,
    pub d_fused: usize,
    pub task: Task,
    pub dropout_p: f32,
    pub use_skip: bool,
    pub use_film_fusion: bool,
}

impl ModelConfig {
    pub fn classification(d_tab_in: usize) -> ModelConfig {
        ModelConfig {
            d_img_in: 1280,
            d_tab_in,
            d_emb: 64,
            d_fused: 128,
            task: Task::Classification {
                num_classes: AQI_CLASSES,
            },
            dropout_p: 0.2,
            use_skip: true,
            use_film_fusion: true,
        }
    }

    pub fn regression(d_tab_in: usize) -> ModelConfig {
        ModelConfig {
            task: Task::Regression,
            ..ModelConfig::classification(d_tab_in)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_img_in == 0 || self.d_tab_in == 0 || self.d_emb == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_fused != 2 * self.d_emb {
            return Err(Error::Config(format!(
                "d_fused must equal 2*d_emb ({} != 2*{})",
                self.d_fused, self.d_emb
            )));
        }
        if let Task::Classification { num_classes } = self.task {
            if num_classes != AQI_CLASSES {
                return Err(Error::Config(format!(
                    "classification uses the {AQI_CLASSES} AQI categories, got {num_classes}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.task.out_dim()
    }

    /// The input skip needs a learned projection when widths differ.
    pub fn has_skip_proj(&self) -> bool {
        self.use_skip && self.d_tab_in != self.d_emb
    }
}

/// Dropout behavior for one forward call. Train mode derives every dropout
/// mask from the given seed, so a call is reproducible given (params,
/// inputs, seed).
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

impl Mode {
    fn phase(&self) -> Phase {
        match self {
            Mode::Eval => Phase::Eval,
            Mode::Train { .. } => Phase::Train,
        }
    }
}

/// Intermediate activations exposed for tests and inspection.
#[derive(Debug)]
pub struct ForwardTrace {
    pub z_img: Tensor,
    pub z_tab: Tensor,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub z_mod: Option<Tensor>,
    pub z_mm: Tensor,
}

/// Batch targets for the two downstream tasks. Class labels are 0-based.
#[derive(Clone, Debug)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Vec<f32>),
}

/// Entry indices into the parameter set, fixed by the build order.
#[derive(Clone, Debug)]
struct Wiring {
    img_proj: usize,
    img_norm: usize,
    tab_fc1: usize,
    tab_norm1: usize,
    tab_fc2: usize,
    tab_norm2: usize,
    tab_skip: Option<usize>,
    film: Option<usize>,
    head_fc1: usize,
    head_norm: usize,
    head_out: usize,
}

fn expected_names(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = config.d_emb;
    let mut names: Vec<(String, Vec<usize>)> = vec![
        ("img.proj.weight".into(), vec![e, config.d_img_in]),
        ("img.proj.bias".into(), vec![e]),
        ("img.norm.gain".into(), vec![e]),
        ("img.norm.shift".into(), vec![e]),
        ("tab.fc1.weight".into(), vec![e, config.d_tab_in]),
        ("tab.fc1.bias".into(), vec![e]),
        ("tab.norm1.gain".into(), vec![e]),
        ("tab.norm1.shift".into(), vec![e]),
        ("tab.fc2.weight".into(), vec![e, e]),
        ("tab.fc2.bias".into(), vec![e]),
        ("tab.norm2.gain".into(), vec![e]),
        ("tab.norm2.shift".into(), vec![e]),
    ];
    if config.has_skip_proj() {
        names.push(("tab.skip.weight".into(), vec![e, config.d_tab_in]));
        names.push(("tab.skip.bias".into(), vec![e]));
    }
    if config.use_film_fusion {
        names.push(("fusion.film.weight".into(), vec![config.d_fused, e]));
        names.push(("fusion.film.bias".into(), vec![config.d_fused]));
    }
    names.push(("head.fc1.weight".into(), vec![e, config.d_fused]));
    names.push(("head.fc1.bias".into(), vec![e]));
    names.push(("head.norm.gain".into(), vec![e]));
    names.push(("head.norm.shift".into(), vec![e]));
    names.push(("head.out.weight".into(), vec![config.out_dim(), e]));
    names.push(("head.out.bias".into(), vec![config.out_dim()]));
    names
}

/// Build a freshly initialized parameter set for the given config.
/// Each layer draws from its own named stream, so two builds with the same
/// seed are bit-identical regardless of process or build order.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let e = config.d_emb;
    let mut set = ParameterSet::new();
    let push_linear = |set: &mut ParameterSet, name: &str, d_in: usize, d_out: usize| {
        let mut rng = stream(seed).tag("init").tag(name).rng();
        let layer = LinearLayer::init(d_in, d_out, &mut rng);
        set.push(format!("{name}.weight"), layer.weight);
        set.push(format!("{name}.bias"), layer.bias);
    };
    let push_norm = |set: &mut ParameterSet, name: &str, d: usize| {
        let layer = LayerNormLayer::init(d);
        set.push(format!("{name}.gain"), layer.gain);
        set.push(format!("{name}.shift"), layer.shift);
    };
    push_linear(&mut set, "img.proj", config.d_img_in, e);
    push_norm(&mut set, "img.norm", e);
    push_linear(&mut set, "tab.fc1", config.d_tab_in, e);
    push_norm(&mut set, "tab.norm1", e);
    push_linear(&mut set, "tab.fc2", e, e);
    push_norm(&mut set, "tab.norm2", e);
    if config.has_skip_proj() {
        push_linear(&mut set, "tab.skip", config.d_tab_in, e);
    }
    if config.use_film_fusion {
        push_linear(&mut set, "fusion.film", e, config.d_fused);
    }
    push_linear(&mut set, "head.fc1", config.d_fused, e);
    push_norm(&mut set, "head.norm", e);
    push_linear(&mut set, "head.out", e, config.out_dim());
    Ok(set)
}

/// A config plus its parameter set, wired for forward/backward.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParameterSet,
    wiring: Wiring,
}

struct BackCache {
    x_img: Tensor,
    x_tab: Tensor,
    img_ln: LayerNormCache,
    img_ln_out: Tensor,
    img_mask: DropoutMask,
    tab_ln1: LayerNormCache,
    tab_ln1_out: Tensor,
    tab_mask1: DropoutMask,
    h1: Tensor,
    tab_ln2: LayerNormCache,
    tab_ln2_out: Tensor,
    tab_mask2: DropoutMask,
    z_img: Tensor,
    z_tab: Tensor,
    gamma: Option<Tensor>,
    beta: Option<Tensor>,
    z_mod: Option<Tensor>,
    z_mm: Tensor,
    head_ln: LayerNormCache,
    head_ln_out: Tensor,
    head_mask: DropoutMask,
    h4: Tensor,
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (v, &w) in out.data_mut().iter_mut().zip(b.data()) {
        *v *= w;
    }
    out
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (v, &w) in acc.data_mut().iter_mut().zip(other.data()) {
        *v += w;
    }
}

impl Model {
    /// Wire an existing parameter set; the set must match the config's
    /// build order exactly.
    pub fn new(config: ModelConfig, params: ParameterSet) -> Result<Model> {
        config.validate()?;
        let expected = expected_names(&config);
        if params.len() != expected.len() {
            return Err(Error::Codec(format!(
                "parameter set has {} entries, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        for (i, (name, shape)) in expected.iter().enumerate() {
            if params.name(i) != name || params.tensor(i).shape() != shape.as_slice() {
                return Err(Error::Codec(format!(
                    "entry {i} is {}{:?}, config expects {}{:?}",
                    params.name(i),
                    params.tensor(i).shape(),
                    name,
                    shape
                )));
            }
        }
        let mut idx = 12;
        let tab_skip = config.has_skip_proj().then(|| {
            let i = idx;
            idx += 2;
            i
        });
        let film = config.use_film_fusion.then(|| {
            let i = idx;
            idx += 2;
            i
        });
        let wiring = Wiring {
            img_proj: 0,
            img_norm: 2,
            tab_fc1: 4,
            tab_norm1: 6,
            tab_fc2: 8,
            tab_norm2: 10,
            tab_skip,
            film,
            head_fc1: idx,
            head_norm: idx + 2,
            head_out: idx + 4,
        };
        Ok(Model {
            config,
            params,
            wiring,
        })
    }

    /// Build and wire a fresh model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        let params = build_model(&config, seed)?;
        Model::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    fn weight(&self, i: usize) -> &Tensor {
        self.params.tensor(i)
    }

    fn norm_view(&self, i: usize) -> LayerNormLayer {
        LayerNormLayer {
            gain: self.params.tensor(i).clone(),
            shift: self.params.tensor(i + 1).clone(),
            epsilon: crate::layers::LAYER_NORM_EPSILON,
        }
    }

    fn check_inputs(&self, x_img: &Tensor, x_tab: &Tensor) -> Result<()> {
        if x_img.shape().len() != 2 || x_tab.shape().len() != 2 {
            return Err(Error::Shape("model inputs must be 2-D [batch x d]".into()));
        }
        if x_img.rows() != x_tab.rows() {
            return Err(Error::Shape(format!(
                "batch mismatch: image {} rows, tabular {} rows",
                x_img.rows(),
                x_tab.rows()
            )));
        }
        if x_img.cols() != self.config.d_img_in {
            return Err(Error::Shape(format!(
                "image input has {} columns, model expects {}",
                x_img.cols(),
                self.config.d_img_in
            )));
        }
        if x_tab.cols() != self.config.d_tab_in {
            return Err(Error::Shape(format!(
                "tabular input has {} columns, model expects {}",
                x_tab.cols(),
                self.config.d_tab_in
            )));
        }
        Ok(())
    }

    fn forward_full(&self, x_img: &Tensor, x_tab: &Tensor, mode: Mode) -> Result<(Tensor, BackCache)> {
        self.check_inputs(x_img, x_tab)?;
        let w = &self.wiring;
        let p = self.config.dropout_p;
        let phase = mode.phase();
        let site_rng = |site: u64| match mode {
            Mode::Eval => stream(0).rng(),
            Mode::Train { dropout_seed } => stream(dropout_seed).tag("site").idx(site).rng(),
        };

        // Image branch: Linear -> LayerNorm -> ReLU -> Dropout.
        let img_pre = matmul_xwt(x_img, self.weight(w.img_proj), Some(self.weight(w.img_proj + 1)))?;
        let (img_normed, img_ln) = layer_norm_forward(&self.norm_view(w.img_norm), &img_pre)?;
        drop(img_pre);
        let img_act = relu_forward(&img_normed);
        let (z_img, img_mask) = dropout_forward(&img_act, p, phase, &mut site_rng(0))?;

        // Tabular block one.
        let tab_pre1 = matmul_xwt(x_tab, self.weight(w.tab_fc1), Some(self.weight(w.tab_fc1 + 1)))?;
        let (tab_n1, tab_ln1) = layer_norm_forward(&self.norm_view(w.tab_norm1), &tab_pre1)?;
        let tab_a1 = relu_forward(&tab_n1);
        let (h1, tab_mask1) = dropout_forward(&tab_a1, p, phase, &mut site_rng(1))?;

        // Tabular block two, with the input skip added pre-normalization.
        let mut tab_pre2 = matmul_xwt(&h1, self.weight(w.tab_fc2), Some(self.weight(w.tab_fc2 + 1)))?;
        if self.config.use_skip {
            match w.tab_skip {
                Some(sk) => {
                    let skip = matmul_xwt(x_tab, self.weight(sk), Some(self.weight(sk + 1)))?;
                    add_into(&mut tab_pre2, &skip);
                }
                None => add_into(&mut tab_pre2, x_tab),
            }
        }
        let (tab_n2, tab_ln2) = layer_norm_forward(&self.norm_view(w.tab_norm2), &tab_pre2)?;
        let tab_a2 = relu_forward(&tab_n2);
        let (z_tab, tab_mask2) = dropout_forward(&tab_a2, p, phase, &mut site_rng(2))?;

        // Fusion: gamma/beta from the tabular embedding modulate z_img.
        let (z_mm, gamma, beta, z_mod) = if let Some(f) = w.film {
            let gb = matmul_xwt(&z_tab, self.weight(f), Some(self.weight(f + 1)))?;
            let (gamma, beta) = split_cols(&gb, self.config.d_emb);
            let mut z_mod = hadamard(&gamma, &z_img);
            add_into(&mut z_mod, &beta);
            let z_mm = concat_cols(&z_mod, &z_tab)?;
            (z_mm, Some(gamma), Some(beta), Some(z_mod))
        } else {
            (concat_cols(&z_img, &z_tab)?, None, None, None)
        };

        // Prediction head.
        let head_pre = matmul_xwt(&z_mm, self.weight(w.head_fc1), Some(self.weight(w.head_fc1 + 1)))?;
        let (head_n, head_ln) = layer_norm_forward(&self.norm_view(w.head_norm), &head_pre)?;
        let head_a = relu_forward(&head_n);
        let (h4, head_mask) = dropout_forward(&head_a, p, phase, &mut site_rng(3))?;
        let out = matmul_xwt(&h4, self.weight(w.head_out), Some(self.weight(w.head_out + 1)))?;

        let cache = BackCache {
            x_img: x_img.clone(),
            x_tab: x_tab.clone(),
            img_ln,
            img_ln_out: img_normed,
            img_mask,
            tab_ln1,
            tab_ln1_out: tab_n1,
            tab_mask1,
            h1,
            tab_ln2,
            tab_ln2_out: tab_n2,
            tab_mask2,
            z_img,
            z_tab,
            gamma,
            beta,
            z_mod,
            z_mm,
            head_ln,
            head_ln_out: head_n,
            head_mask,
            h4,
        };
        Ok((out, cache))
    }

    /// Forward pass returning raw outputs (logits or scalar) and a trace of
    /// the fusion intermediates.
    pub fn forward(&self, x_img: &Tensor, x_tab: &Tensor, mode: Mode) -> Result<(Tensor, ForwardTrace)> {
        let (out, cache) = self.forward_full(x_img, x_tab, mode)?;
        out.check_finite("model output")?;
        let trace = ForwardTrace {
            z_img: cache.z_img,
            z_tab: cache.z_tab,
            gamma: cache.gamma,
            beta: cache.beta,
            z_mod: cache.z_mod,
            z_mm: cache.z_mm,
        };
        Ok((out, trace))
    }

    /// Loss plus gradients for every trainable entry.
    pub fn loss_and_grad(
        &self,
        x_img: &Tensor,
        x_tab: &Tensor,
        targets: &BatchTargets,
        mode: Mode,
    ) -> Result<(f32, GradientSet)> {
        let (out, cache) = self.forward_full(x_img, x_tab, mode)?;
        let (loss_value, d_out) = loss_grad(&out, targets, &self.config.task)?;
        let grads = self.backward(&cache, &d_out);
        Ok((loss_value, grads))
    }

    fn backward(&self, cache: &BackCache, d_out: &Tensor) -> GradientSet {
        let w = &self.wiring;
        let e = self.config.d_emb;

        // Head.
        let d_w_out = matmul_ytx(d_out, &cache.h4);
        let d_b_out = column_sums(d_out);
        let d_h4 = matmul_xw(d_out, self.weight(w.head_out));
        let d_head_act = dropout_backward(&cache.head_mask, &d_h4);
        let d_head_n = relu_backward(&cache.head_ln_out, &d_head_act);
        let head_norm = self.norm_view(w.head_norm);
        let head_ln_g = layer_norm_backward(&head_norm, &cache.head_ln, &d_head_n);
        let d_w_h1 = matmul_ytx(&head_ln_g.dx, &cache.z_mm);
        let d_b_h1 = column_sums(&head_ln_g.dx);
        let d_zmm = matmul_xw(&head_ln_g.dx, self.weight(w.head_fc1));

        // Unfuse.
        let (d_front, d_ztab_mm) = split_cols(&d_zmm, e);
        let mut d_ztab = d_ztab_mm;
        let mut film_grads = None;
        let d_zimg = if let Some(f) = w.film {
            let gamma = cache.gamma.as_ref().unwrap();
            let d_gamma = hadamard(&d_front, &cache.z_img);
            let d_beta = d_front.clone();
            let d_zimg = hadamard(&d_front, gamma);
            let d_gb = concat_cols(&d_gamma, &d_beta).unwrap();
            let d_w_f = matmul_ytx(&d_gb, &cache.z_tab);
            let d_b_f = column_sums(&d_gb);
            add_into(&mut d_ztab, &matmul_xw(&d_gb, self.weight(f)));
            film_grads = Some((d_w_f, d_b_f));
            d_zimg
        } else {
            d_front
        };

        // Image branch.
        let d_img_act = dropout_backward(&cache.img_mask, &d_zimg);
        let d_img_n = relu_backward(&cache.img_ln_out, &d_img_act);
        let img_norm = self.norm_view(w.img_norm);
        let img_ln_g = layer_norm_backward(&img_norm, &cache.img_ln, &d_img_n);
        let d_w_img = matmul_ytx(&img_ln_g.dx, &cache.x_img);
        let d_b_img = column_sums(&img_ln_g.dx);

        // Tabular block two (and the skip projection, which shares d_pre2).
        let d_tab_act2 = dropout_backward(&cache.tab_mask2, &d_ztab);
        let d_tab_n2 = relu_backward(&cache.tab_ln2_out, &d_tab_act2);
        let tab_norm2 = self.norm_view(w.tab_norm2);
        let tab_ln2_g = layer_norm_backward(&tab_norm2, &cache.tab_ln2, &d_tab_n2);
        let d_w_t2 = matmul_ytx(&tab_ln2_g.dx, &cache.h1);
        let d_b_t2 = column_sums(&tab_ln2_g.dx);
        let d_h1 = matmul_xw(&tab_ln2_g.dx, self.weight(w.tab_fc2));
        let skip_grads = w.tab_skip.map(|_| {
            (
                matmul_ytx(&tab_ln2_g.dx, &cache.x_tab),
                column_sums(&tab_ln2_g.dx),
            )
        });

        // Tabular block one.
        let d_tab_act1 = dropout_backward(&cache.tab_mask1, &d_h1);
        let d_tab_n1 = relu_backward(&cache.tab_ln1_out, &d_tab_act1);
        let tab_norm1 = self.norm_view(w.tab_norm1);
        let tab_ln1_g = layer_norm_backward(&tab_norm1, &cache.tab_ln1, &d_tab_n1);
        let d_w_t1 = matmul_ytx(&tab_ln1_g.dx, &cache.x_tab);
        let d_b_t1 = column_sums(&tab_ln1_g.dx);

        // Assemble in build order.
        let mut g = GradientSet::new();
        g.push("img.proj.weight", d_w_img);
        g.push("img.proj.bias", d_b_img);
        g.push("img.norm.gain", img_ln_g.dgain);
        g.push("img.norm.shift", img_ln_g.dshift);
        g.push("tab.fc1.weight", d_w_t1);
        g.push("tab.fc1.bias", d_b_t1);
        g.push("tab.norm1.gain", tab_ln1_g.dgain);
        g.push("tab.norm1.shift", tab_ln1_g.dshift);
        g.push("tab.fc2.weight", d_w_t2);
        g.push("tab.fc2.bias", d_b_t2);
        g.push("tab.norm2.gain", tab_ln2_g.dgain);
        g.push("tab.norm2.shift", tab_ln2_g.dshift);
        if let Some((dw, db)) = skip_grads {
            g.push("tab.skip.weight", dw);
            g.push("tab.skip.bias", db);
        }
        if let Some((dw, db)) = film_grads {
            g.push("fusion.film.weight", dw);
            g.push("fusion.film.bias", db);
        }
        g.push("head.fc1.weight", d_w_h1);
        g.push("head.fc1.bias", d_b_h1);
        g.push("head.norm.gain", head_ln_g.dgain);
        g.push("head.norm.shift", head_ln_g.dshift);
        g.push("head.out.weight", d_w_out);
        g.push("head.out.bias", d_b_out);
        g
    }
}

// Checkpoint = format byte, u32 config JSON length, config JSON, then the
// parameter set file form.
const CHECKPOINT_FORMAT: u8 = 1;

pub fn write_checkpoint(path: &std::path::Path, model: &Model) -> Result<()> {
    let mut out = Vec::new();
    out.push(CHECKPOINT_FORMAT);
    let json = serde_json::to_vec(model.config()).map_err(|e| Error::Codec(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    crate::params::write_param_file(&mut out, model.params())?;
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &std::path::Path) -> Result<Model> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if bytes.is_empty() || bytes[0] != CHECKPOINT_FORMAT {
        return Err(Error::Codec(format!(
            "{} is not a version-{CHECKPOINT_FORMAT} checkpoint",
            path.display()
        )));
    }
    if bytes.len() < 5 {
        return Err(Error::Codec("checkpoint header truncated".into()));
    }
    let json_len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    if bytes.len() < 5 + json_len {
        return Err(Error::Codec("checkpoint config truncated".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[5..5 + json_len])
        .map_err(|e| Error::Codec(format!("bad checkpoint config: {e}")))?;
    let mut rest = &bytes[5 + json_len..];
    let params = crate::params::read_param_file(&mut rest)?;
    Model::new(config, params)
}

/// Row-wise softmax via the log-sum-exp trick.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (batch, c) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(vec![batch, c]);
    for b in 0..batch {
        let row = logits.row(b);
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - m) as f64).exp();
        }
        let orow = out.row_mut(b);
        for (i, &v) in row.iter().enumerate() {
            orow[i] = (((v - m) as f64).exp() / denom) as f32;
        }
    }
    out
}

/// Task loss on raw outputs: batch-mean cross entropy (classification) or
/// batch-mean absolute error (regression).
pub fn loss(output: &Tensor, targets: &BatchTargets, task: &Task) -> Result<f32> {
    Ok(loss_grad(output, targets, task)?.0)
}

fn loss_grad(output: &Tensor, targets: &BatchTargets, task: &Task) -> Result<(f32, Tensor)> {
    let batch = output.rows();
    if batch == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    match (task, targets) {
        (Task::Classification { num_classes }, BatchTargets::Classes(labels)) => {
            if labels.len() != batch {
                return Err(Error::Shape(format!(
                    "{} labels for a batch of {}",
                    labels.len(),
                    batch
                )));
            }
            let c = *num_classes;
            let mut d = Tensor::zeros(vec![batch, c]);
            let mut total = 0.0f64;
            for b in 0..batch {
                let t = labels[b];
                if t >= c {
                    return Err(Error::Data(format!(
                        "class label {t} out of range 0..{c}"
                    )));
                }
                let row = output.row(b);
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f64;
                for &v in row {
                    denom += ((v - m) as f64).exp();
                }
                let lse = m as f64 + denom.ln();
                total += lse - row[t] as f64;
                let drow = d.row_mut(b);
                for (j, &v) in row.iter().enumerate() {
                    let p = ((v - m) as f64).exp() / denom;
                    let indicator = if j == t { 1.0 } else { 0.0 };
                    drow[j] = ((p - indicator) / batch as f64) as f32;
                }
            }
            Ok(((total / batch as f64) as f32, d))
        }
        (Task::Regression, BatchTargets::Values(values)) => {
            if values.len() != batch {
                return Err(Error::Shape(format!(
                    "{} targets for a batch of {}",
                    values.len(),
                    batch
                )));
            }
            if output.cols() != 1 {
                return Err(Error::Shape(format!(
                    "regression output must have 1 column, got {}",
                    output.cols()
                )));
            }
            let mut d = Tensor::zeros(vec![batch, 1]);
            let mut total = 0.0f64;
            for b in 0..batch {
                let y = values[b];
                if !y.is_finite() {
                    return Err(Error::Data(format!("non-finite regression target {y}")));
                }
                let pred = output.at(b, 0);
                let diff = pred - y;
                total += diff.abs() as f64;
                // Subgradient of |.| is 0 at the kink.
                d.row_mut(b)[0] = diff.signum() * if diff == 0.0 { 0.0 } else { 1.0 } / batch as f32;
            }
            Ok(((total / batch as f64) as f32, d))
        }
        _ => Err(Error::Config(
            "targets do not match the configured task".into(),
        )),
    }
}
