use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BackboneConfig, ModelConfig};
use crate::diffkit::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::diffkit::{Adam, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::huwindow::{cuts_from_theta, CutMode, CutVector};
use crate::preprocess::Patch;
use crate::scalar::Scalar;

pub const BN_MOMENTUM: f64 = 0.9;
pub const THETA: &str = "window.theta";

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// A built model: its configuration and every named tensor, in a fixed
/// order (trainable weights, batch-norm running statistics, window theta).
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    params: Vec<Param<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; dropout when an RNG is supplied.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Node handles of one forward pass.
pub struct Forward {
    pub prob: NodeId,
    pub logit: NodeId,
    /// Graph node bound to each entry of [`Network::params`].
    pub bound: Vec<NodeId>,
    /// `(param index of running_mean, batch-norm node)` per batch-norm layer.
    pub batchnorms: Vec<(usize, NodeId)>,
    /// Activation of the last conv layer of each extractor.
    pub last_conv: Vec<NodeId>,
    /// Input of every ReLU, in evaluation order.
    pub pre_activations: Vec<NodeId>,
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

fn conv_name(ext: usize, i: usize, what: &str) -> String {
    format!("ext{ext}.conv{i}.{what}")
}

fn bn_name(ext: usize, i: usize, what: &str) -> String {
    format!("ext{ext}.bn{i}.{what}")
}

fn dense_name(i: usize, what: &str) -> String {
    format!("head.dense{i}.{what}")
}

impl<T: Scalar> Network<T> {
    /// He-uniform weights, zero biases, `gamma = 1`, `beta = 0`, running
    /// statistics `(0, 1)`; all draws from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.backbone().clone();
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor<T>, trainable: bool| params.push(Param { name, value, trainable });
        for e in 0..config.n_extractors() {
            let mut cin = 1;
            for (i, &cout) in b.conv_channels.iter().enumerate() {
                push(conv_name(e, i, "weight"), he_uniform(&mut rng, vec![cout, cin, 3, 3, 3], cin * 27), true);
                push(conv_name(e, i, "bias"), Tensor::zeros(vec![cout]), true);
                push(bn_name(e, i, "gamma"), Tensor::full(vec![cout], T::one()), true);
                push(bn_name(e, i, "beta"), Tensor::zeros(vec![cout]), true);
                push(bn_name(e, i, "running_mean"), Tensor::zeros(vec![cout]), false);
                push(bn_name(e, i, "running_var"), Tensor::full(vec![cout], T::one()), false);
                cin = cout;
            }
        }
        let mut fin = b.feature_width() * config.n_extractors();
        for (i, &fout) in b.dense_widths.iter().enumerate() {
            push(dense_name(i, "weight"), he_uniform(&mut rng, vec![fout, fin], fin), true);
            push(dense_name(i, "bias"), Tensor::zeros(vec![fout]), true);
            fin = fout;
        }
        if let ModelConfig::Lmlcc(l) = &config {
            let cv = CutVector::<T>::new(l.n_branches, l.init, l.cuts_mode, rng.random())?;
            let n = cv.theta.len();
            push(THETA.into(), Tensor::new(vec![n], cv.theta)?, l.cuts_mode == CutMode::Learnable);
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.params[i].value)
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].trainable).collect()
    }

    /// Adam step over the trainable tensors; `grads` follow
    /// [`Self::trainable_indices`] order.
    pub fn apply_update(&mut self, adam: &mut Adam<T>, grads: &[Tensor<T>]) -> Result<()> {
        let mut slots: Vec<&mut [T]> = self
            .params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| p.value.data_mut())
            .collect();
        let grads: Vec<&[T]> = grads.iter().map(|t| t.data()).collect();
        adam.update(&mut slots, &grads)
    }

    /// Interior cut positions of the window layer, if the model has one.
    pub fn cuts(&self) -> Option<Vec<T>> {
        self.param(THETA).map(|t| cuts_from_theta(t.data()))
    }

    pub fn patch_side(&self) -> usize {
        self.config.backbone().patch_side
    }

    /// Stacks patches into a `[N, 1, s, s, s]` batch.
    pub fn batch_tensor(&self, patches: &[&Patch<T>]) -> Result<Tensor<T>> {
        let s = self.patch_side();
        let mut data = Vec::with_capacity(patches.len() * s * s * s);
        for p in patches {
            if p.side != s {
                return Err(Error::Shape(format!(
                    "patch {} has side {}, model expects {s}",
                    p.nodule_id, p.side
                )));
            }
            data.extend_from_slice(&p.voxels);
        }
        Tensor::new(vec![patches.len(), 1, s, s, s], data)
    }

    /// Builds the forward graph for `x: [N, 1, s, s, s]`. With
    /// `with_grad = false` every parameter is bound as a constant.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Tensor<T>,
        mode: Mode,
        with_grad: bool,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let s = self.patch_side();
        if x.shape().len() != 5 || x.shape()[1..] != [1, s, s, s] {
            return Err(Error::Shape(format!("model expects [N, 1, {s}, {s}, {s}], got {:?}", x.shape())));
        }
        let bound: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                let id = if with_grad && p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.input(p.value.clone())
                };
                g.set_label(id, p.name.clone());
                id
            })
            .collect();
        let node = |name: &str| bound[self.index_of(name).expect("parameter exists")];
        let b: &BackboneConfig = self.config.backbone();
        let input = g.input(x);

        let branches: Vec<NodeId> = match &self.config {
            ModelConfig::Backbone(_) => vec![input],
            ModelConfig::Lmlcc(l) => {
                let w = g.hu_window(input, node(THETA), T::lit(l.tau), l.include_original)?;
                g.set_label(w, "window");
                (0..l.n_extractors()).map(|k| g.select_channel(w, k)).collect::<Result<_>>()?
            }
        };

        let mut batchnorms = Vec::new();
        let mut pre_activations = Vec::new();
        let mut last_conv = Vec::new();
        let mut features = Vec::new();
        for (e, &branch) in branches.iter().enumerate() {
            let mut h = branch;
            for i in 0..b.conv_channels.len() {
                h = g.conv3d(h, node(&conv_name(e, i, "weight")), node(&conv_name(e, i, "bias")))?;
                let rm = self.index_of(&bn_name(e, i, "running_mean")).unwrap();
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => Some((self.params[rm].value.data(), self.params[rm + 1].value.data())),
                };
                h = g.batchnorm(h, node(&bn_name(e, i, "gamma")), node(&bn_name(e, i, "beta")), running)?;
                batchnorms.push((rm, h));
                pre_activations.push(h);
                h = g.relu(h);
                g.set_label(h, format!("ext{e}.relu{i}"));
                if i + 1 == b.conv_channels.len() {
                    last_conv.push(h);
                }
                if b.pool_after.contains(&i) {
                    h = g.maxpool3d(h)?;
                }
                if b.dropout_after.contains(&i) {
                    if let (Mode::Train, Some(rng)) = (mode, dropout.as_deref_mut()) {
                        h = g.dropout(h, b.dropout_rate, rng);
                    }
                }
            }
            features.push(g.flatten(h)?);
        }
        let mut h = if features.len() == 1 { features[0] } else { g.concat(&features)? };
        let n_dense = b.dense_widths.len();
        for i in 0..n_dense {
            h = g.dense(h, node(&dense_name(i, "weight")), node(&dense_name(i, "bias")))?;
            if i + 1 < n_dense {
                pre_activations.push(h);
                h = g.relu(h);
            }
        }
        g.set_label(h, "logit");
        let prob = g.sigmoid(h);
        Ok(Forward {
            prob,
            logit: h,
            bound,
            batchnorms,
            last_conv,
            pre_activations,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages: `running = m * running + (1 - m) * batch`.
    pub fn update_running_stats(&mut self, g: &Graph<T>, fwd: &Forward) {
        let m = T::lit(BN_MOMENTUM);
        for &(rm, node) in &fwd.batchnorms {
            if let Some((mean, var)) = g.batch_stats(node) {
                let (mean, var) = (mean.to_vec(), var.to_vec());
                for (r, b) in self.params[rm].value.data_mut().iter_mut().zip(&mean) {
                    *r = m * *r + (T::one() - m) * *b;
                }
                for (r, b) in self.params[rm + 1].value.data_mut().iter_mut().zip(&var) {
                    *r = m * *r + (T::one() - m) * *b;
                }
            }
        }
    }

    /// Eval-mode probabilities, in input order.
    pub fn predict(&self, patches: &[Patch<T>]) -> Result<Vec<T>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(CHUNK) {
            let refs: Vec<&Patch<T>> = chunk.iter().collect();
            let x = self.batch_tensor(&refs)?;
            let mut g = Graph::new();
            let f = self.forward(&mut g, x, Mode::Eval, false, None)?;
            out.extend_from_slice(g.value(f.prob).data());
        }
        Ok(out)
    }

    /// Copies every tensor whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_matching_from(&mut self, other: &Network<T>) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.param(&p.name) {
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn to_checkpoint(&self, adam: Option<&Adam<T>>) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.to_text(),
            tensors: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            adam: adam.cloned(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let config = ModelConfig::from_text(&ck.config)?;
        let mut net = Self::new(config, 0)?;
        if ck.tensors.len() != net.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {}",
                ck.tensors.len(),
                net.params.len()
            )));
        }
        for p in &mut net.params {
            let t = ck
                .tensor(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("tensor {} has shape {:?}", p.name, t.shape())));
            }
            p.value = t.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, adam: Option<&Adam<T>>) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint(adam))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, Option<Adam<T>>)> {
        let ck = load_checkpoint(path)?;
        let net = Self::from_checkpoint(&ck)?;
        Ok((net, ck.adam))
    }
}
