//! The representation learner: a small MLP trained with a weighted triplet
//! loss.
//!
//! The network is a stack of affine layers with rectifiers between them and,
//! by default, an L2-normalization layer on top, so embeddings live on the
//! unit sphere. Training minimizes a hinge over cluster-derived triplets
//! `(anchor, positive, negative)`:
//!
//! ```text
//! loss = max(0, margin + gamma * D(f(a), f(p)) - D(f(a), f(n)))
//! ```
//!
//! with `D` the squared Euclidean distance. `gamma > 1` pulls same-cluster
//! pairs together harder than it pushes different-cluster pairs apart, which
//! matters because early cluster assignments are noisy in the easy-to-hard
//! direction: same-cluster pairs are almost always right, cross-cluster
//! pairs often wrong. Gradients are computed analytically (no autodiff) and
//! applied with momentum SGD under an inverse learning-rate decay schedule.
//! The global scale `lambda / (Kc - 1)` that the merge objective would put
//! in front of this loss is folded into the learning rate.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::agglomerative::Partition;
use crate::knn::{sample_affinity, SampleAffinityGraph};
use crate::{Error, Result};

/// One affine layer's parameters (or a matching gradient/velocity block).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `out x in` weight matrix.
    pub w: Array2<f64>,
    /// Length-`out` bias vector.
    pub b: Array1<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.dim()),
        }
    }
}

/// Gradient blocks mirroring a network's layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Per-layer gradient of the objective.
    pub layers: Vec<LayerParams>,
}

/// A feed-forward embedder: affine layers, rectifiers between them, and an
/// optional L2-normalization output stage.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    layer_dims: Vec<usize>,
    layers: Vec<LayerParams>,
    normalize_output: bool,
    seed: u64,
}

/// Initializes a unit-output network: weights Gaussian with per-layer scale
/// `sqrt(2 / fan_in)`, biases zero, deterministic per seed.
pub fn init_net(layer_dims: &[usize], seed: u64) -> Result<EmbeddingNet> {
    EmbeddingNet::init(layer_dims, true, seed)
}

impl EmbeddingNet {
    /// As [`init_net`], with control over the output stage. Networks without
    /// normalization end in a plain affine layer; the low-dimensional
    /// visualization pipeline uses that form.
    pub fn init(layer_dims: &[usize], normalize_output: bool, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs an input and an output dimension, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dimensions must be positive, got {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            });
            layers.push(LayerParams {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            normalize_output,
            seed,
        })
    }

    /// Layer widths `[d_in, h1, ..., d_out]`.
    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Output dimension.
    pub fn out_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Whether outputs are projected to the unit sphere.
    pub fn normalizes_output(&self) -> bool {
        self.normalize_output
    }

    /// Seed the parameters were initialized from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Read access to the parameter blocks.
    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Zeroed gradient/velocity blocks matching this network.
    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    /// Embeds a single input vector.
    pub fn forward(&self, x: ndarray::ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward_tape(x)?.output)
    }

    /// Embeds every row of `x`. Row `i` of the result is `forward(x.row(i))`.
    pub fn embed_all(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.out_dim()));
        for (i, row) in x.rows().into_iter().enumerate() {
            let y = self.forward(row).map_err(|e| match e {
                Error::Normalization(msg) => Error::Normalization(format!("sample {i}: {msg}")),
                other => other,
            })?;
            out.row_mut(i).assign(&y);
        }
        Ok(out)
    }

    /// Forward pass retaining everything backprop needs.
    fn forward_tape(&self, x: ndarray::ArrayView1<'_, f64>) -> Result<Tape> {
        debug_assert_eq!(x.len(), self.layer_dims[0]);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let mut a = layer.w.dot(&cur) + &layer.b;
            if l + 1 < self.layers.len() {
                a.mapv_inplace(|v| v.max(0.0));
            }
            cur = a;
        }
        let (output, norm) = if self.normalize_output {
            let n = cur.dot(&cur).sqrt();
            if n == 0.0 {
                return Err(Error::Normalization(
                    "pre-normalization output is the zero vector".into(),
                ));
            }
            (cur.mapv_into(|v| v / n), n)
        } else {
            (cur, 1.0)
        };
        Ok(Tape {
            inputs,
            output,
            norm,
        })
    }

    /// Propagates an output-side gradient of one sample down the stack,
    /// accumulating into `grads`.
    fn backprop_sample(&self, tape: &Tape, out_grad: &Array1<f64>, grads: &mut Gradients) {
        let mut g = if self.normalize_output {
            // y = o / |o|: dL/do = (g - (g . y) y) / |o|.
            let y = &tape.output;
            let dot = out_grad.dot(y);
            (out_grad - &y.mapv(|v| v * dot)).mapv(|v| v / tape.norm)
        } else {
            out_grad.clone()
        };
        for l in (0..self.layers.len()).rev() {
            let input = &tape.inputs[l];
            {
                let gl = &mut grads.layers[l];
                for (r, gr) in g.iter().enumerate() {
                    if *gr != 0.0 {
                        let mut row = gl.w.row_mut(r);
                        row.scaled_add(*gr, input);
                    }
                }
                gl.b += &g;
            }
            if l > 0 {
                let mut upstream = self.layers[l].w.t().dot(&g);
                // The rectifier sits between layers; its input equals this
                // layer's recorded input vector.
                for (u, &inp) in upstream.iter_mut().zip(input.iter()) {
                    if inp <= 0.0 {
                        *u = 0.0;
                    }
                }
                g = upstream;
            }
        }
    }
}

struct Tape {
    /// Input vector of each affine layer (post-rectifier for hidden ones).
    inputs: Vec<Array1<f64>>,
    /// Final embedding.
    output: Array1<f64>,
    /// Norm of the pre-normalization output (1.0 when not normalizing).
    norm: f64,
}

// ---------------------------------------------------------------------------
// Triplets and their loss
// ---------------------------------------------------------------------------

/// An (anchor, positive, negative) index triple: anchor and positive share a
/// cluster, the negative does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: u32,
    pub positive: u32,
    pub negative: u32,
}

fn squared_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hinge triplet loss of one triple under the current network.
pub fn triplet_loss(
    net: &EmbeddingNet,
    x: &Array2<f64>,
    t: &Triplet,
    gamma: f64,
    margin: f64,
) -> Result<f64> {
    let ya = net.forward(x.row(t.anchor as usize))?;
    let yp = net.forward(x.row(t.positive as usize))?;
    let yn = net.forward(x.row(t.negative as usize))?;
    Ok((margin + gamma * squared_dist(&ya, &yp) - squared_dist(&ya, &yn)).max(0.0))
}

/// Draws triplets for a batch.
///
/// Each batch sample acts as an anchor: its positive is drawn uniformly from
/// co-cluster members inside the batch, and its negatives are the first
/// `kc` of its graph neighbours (in affinity order, i.e. nearest first) that
/// lie in the batch but in another cluster. Up to `per_anchor` triplets are
/// emitted per anchor, one per negative. Anchors lacking a positive or a
/// negative are skipped; an empty result is legitimate.
pub fn sample_triplets(
    partition: &Partition,
    graph: &SampleAffinityGraph,
    batch_indices: &[u32],
    kc: usize,
    per_anchor: usize,
    seed: u64,
) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_triplets_rng(partition, graph, batch_indices, kc, per_anchor, &mut rng)
}

fn sample_triplets_rng(
    partition: &Partition,
    graph: &SampleAffinityGraph,
    batch_indices: &[u32],
    kc: usize,
    per_anchor: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Triplet> {
    let assignment = partition.assignment();
    let in_batch: BTreeSet<u32> = batch_indices.iter().copied().collect();
    let mut by_cluster: HashMap<u32, Vec<u32>> = HashMap::new();
    for &s in batch_indices {
        by_cluster
            .entry(assignment[s as usize])
            .or_default()
            .push(s);
    }
    let mut triplets = Vec::new();
    for &anchor in batch_indices {
        let cluster = assignment[anchor as usize];
        let mates = &by_cluster[&cluster];
        if mates.len() < 2 {
            continue;
        }
        let negatives: Vec<u32> = graph
            .neighbors(anchor as usize)
            .iter()
            .copied()
            .filter(|n| in_batch.contains(n) && assignment[*n as usize] != cluster)
            .take(kc)
            .collect();
        for &negative in negatives.iter().take(per_anchor) {
            let positive = loop {
                let cand = mates[rng.gen_range(0..mates.len())];
                if cand != anchor {
                    break cand;
                }
            };
            triplets.push(Triplet {
                anchor,
                positive,
                negative,
            });
        }
    }
    triplets
}

/// Result of one backward pass over a triplet batch.
#[derive(Debug)]
pub struct BackwardResult {
    /// Gradient of the mean triplet loss plus the weight-decay term.
    pub grads: Gradients,
    /// Mean hinge value over all triplets (inactive ones contribute 0).
    pub mean_loss: f64,
    /// Number of triplets with a positive hinge.
    pub active: usize,
}

/// Analytic gradients of the mean triplet loss over `triplets`, with
/// `weight_decay * parameter` added to every block.
///
/// Samples are embedded once each; per-triplet output gradients accumulate
/// per sample and are propagated down the stack in ascending sample order,
/// so the reduction order (and therefore the result) is independent of any
/// parallelism elsewhere.
pub fn backward(
    net: &EmbeddingNet,
    x: &Array2<f64>,
    triplets: &[Triplet],
    gamma: f64,
    margin: f64,
    weight_decay: f64,
) -> Result<BackwardResult> {
    if triplets.is_empty() {
        return Err(Error::Logic("backward needs at least one triplet".into()));
    }
    let involved: BTreeSet<u32> = triplets
        .iter()
        .flat_map(|t| [t.anchor, t.positive, t.negative])
        .collect();
    let mut tapes: BTreeMap<u32, Tape> = BTreeMap::new();
    for &s in &involved {
        tapes.insert(s, net.forward_tape(x.row(s as usize))?);
    }
    let mut out_grads: BTreeMap<u32, Array1<f64>> = BTreeMap::new();
    let mut total_loss = 0.0;
    let mut active = 0usize;
    for t in triplets {
        let ya = &tapes[&t.anchor].output;
        let yp = &tapes[&t.positive].output;
        let yn = &tapes[&t.negative].output;
        let hinge = margin + gamma * squared_dist(ya, yp) - squared_dist(ya, yn);
        if hinge <= 0.0 {
            continue;
        }
        total_loss += hinge;
        active += 1;
        let pull = (ya - yp).mapv(|v| 2.0 * gamma * v);
        let push = (ya - yn).mapv(|v| 2.0 * v);
        let dim = ya.len();
        let mut add = |s: u32, delta: Array1<f64>| {
            *out_grads.entry(s).or_insert_with(|| Array1::zeros(dim)) += &delta;
        };
        add(t.anchor, &pull - &push);
        add(t.positive, -pull.clone());
        add(t.negative, push);
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut grads = net.zero_grads();
    for (s, g) in &out_grads {
        let scaled = g.mapv(|v| v * scale);
        net.backprop_sample(&tapes[s], &scaled, &mut grads);
    }
    if weight_decay != 0.0 {
        for (gl, pl) in grads.layers.iter_mut().zip(net.layers()) {
            gl.w.scaled_add(weight_decay, &pl.w);
            gl.b.scaled_add(weight_decay, &pl.b);
        }
    }
    Ok(BackwardResult {
        grads,
        mean_loss: total_loss * scale,
        active,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Solver hyperparameters for momentum SGD with inverse learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// Learning rate at iteration 0.
    pub base_lr: f64,
    /// Momentum coefficient.
    pub momentum: f64,
    /// L2 penalty added to gradients during `backward`.
    pub weight_decay: f64,
    /// Decay speed of the schedule `base_lr * (1 + lr_gamma * t)^(-lr_power)`.
    pub lr_gamma: f64,
    /// Decay exponent of the schedule.
    pub lr_power: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-5,
            lr_gamma: 1e-4,
            lr_power: 0.75,
        }
    }
}

/// Velocity buffers plus the iteration counter of momentum SGD.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    params: SolverParams,
    velocity: Vec<LayerParams>,
    iteration: usize,
}

impl OptimizerState {
    /// Fresh state (zero velocity, iteration 0) for `net`.
    pub fn new(net: &EmbeddingNet, params: SolverParams) -> Self {
        Self {
            params,
            velocity: net.layers().iter().map(LayerParams::zeros_like).collect(),
            iteration: 0,
        }
    }

    /// Solver hyperparameters.
    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    /// Iterations applied so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Learning rate the next step will use:
    /// `base_lr * (1 + lr_gamma * iteration)^(-lr_power)`.
    pub fn current_lr(&self) -> f64 {
        self.params.base_lr
            * (1.0 + self.params.lr_gamma * self.iteration as f64).powf(-self.params.lr_power)
    }

    /// Zeroes the velocity and the iteration counter. Each training period
    /// restarts the schedule from the base learning rate.
    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            v.w.fill(0.0);
            v.b.fill(0.0);
        }
        self.iteration = 0;
    }

    /// One momentum update: `v <- momentum * v - lr_t * g; p <- p + v`.
    pub fn step(&mut self, net: &mut EmbeddingNet, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, p)| g.w.dim() != p.w.dim() || g.b.dim() != p.b.dim())
        {
            return Err(Error::Logic(
                "gradient shapes do not match the network".into(),
            ));
        }
        let lr = self.current_lr();
        let momentum = self.params.momentum;
        for ((v, p), g) in self
            .velocity
            .iter_mut()
            .zip(&mut net.layers)
            .zip(&grads.layers)
        {
            v.w.zip_mut_with(&g.w, |vv, gg| *vv = momentum * *vv - lr * gg);
            v.b.zip_mut_with(&g.b, |vv, gg| *vv = momentum * *vv - lr * gg);
            p.w += &v.w;
            p.b += &v.b;
        }
        self.iteration += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Period training
// ---------------------------------------------------------------------------

/// Knobs for one training period.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Full passes over the data.
    pub epochs: usize,
    /// Samples per batch.
    pub batch_size: usize,
    /// Positive-pair weight in the hinge.
    pub gamma: f64,
    /// Hinge margin.
    pub margin: f64,
    /// Neighbour-cluster bound for negative mining.
    pub kc: usize,
    /// Triplets per anchor (at most one per mined negative).
    pub per_anchor: usize,
    /// Seed for shuffling and positive draws.
    pub seed: u64,
}

/// Runs shuffled-batch triplet training in place and returns the per-epoch
/// mean losses (weighted by triplet count; an epoch that produced no
/// triplets reports 0).
pub fn train_epochs(
    net: &mut EmbeddingNet,
    opt: &mut OptimizerState,
    x: &Array2<f64>,
    partition: &Partition,
    graph: &SampleAffinityGraph,
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut losses = Vec::with_capacity(opts.epochs);
    let wd = opt.params().weight_decay;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let triplets =
                sample_triplets_rng(partition, graph, batch, opts.kc, opts.per_anchor, &mut rng);
            if triplets.is_empty() {
                continue;
            }
            let bw = backward(net, x, &triplets, opts.gamma, opts.margin, wd)?;
            opt.step(net, &bw.grads)?;
            loss_sum += bw.mean_loss * triplets.len() as f64;
            count += triplets.len();
        }
        losses.push(if count > 0 {
            loss_sum / count as f64
        } else {
            0.0
        });
    }
    Ok(losses)
}

/// Output of [`train_period`]: the re-embedded features, the affinity graph
/// rebuilt on them, and the loss curve.
pub struct PeriodOutcome {
    /// `n_s x d_out` embeddings of every sample under the updated network.
    pub features: Array2<f64>,
    /// Affinity graph rebuilt from `features`.
    pub graph: SampleAffinityGraph,
    /// Mean triplet loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// One training period: `epochs` of triplet training against the current
/// partition and graph, then a full re-embedding and a graph rebuild on the
/// new features (`ks` neighbours, bandwidth scale `a`).
#[allow(clippy::too_many_arguments)]
pub fn train_period(
    net: &mut EmbeddingNet,
    opt: &mut OptimizerState,
    x: &Array2<f64>,
    partition: &Partition,
    graph: &SampleAffinityGraph,
    opts: &TrainOptions,
    ks: usize,
    a: f64,
) -> Result<PeriodOutcome> {
    let epoch_losses = train_epochs(net, opt, x, partition, graph, opts)?;
    let features = net.embed_all(x)?;
    let graph = sample_affinity(&features, ks, a)?;
    Ok(PeriodOutcome {
        features,
        graph,
        epoch_losses,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Checkpoint magic: identifies the format and its version.
const CHECKPOINT_MAGIC: &[u8; 8] = b"EMBNET01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layer_dims: Vec<usize>,
    normalize_output: bool,
    seed: u64,
}

impl EmbeddingNet {
    /// Writes the network to `path`.
    ///
    /// Layout: 8-byte magic `EMBNET01`, little-endian `u32` header length, a
    /// JSON header `{layer_dims, normalize_output, seed}`, then every
    /// parameter as little-endian `f64` — for each layer the weight matrix
    /// in row-major order followed by the bias vector.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        let header = serde_json::to_vec(&CheckpointHeader {
            layer_dims: self.layer_dims.clone(),
            normalize_output: self.normalize_output,
            seed: self.seed,
        })
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        for layer in &self.layers {
            for v in layer.w.iter().chain(layer.b.iter()) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a network written by [`EmbeddingNet::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut net = EmbeddingNet::init(&header.layer_dims, header.normalize_output, header.seed)?;
        let mut buf = [0u8; 8];
        for layer in &mut net.layers {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                file.read_exact(&mut buf).map_err(|_| {
                    Error::Format("checkpoint truncated inside the parameter blob".into())
                })?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if file.read(&mut buf)? != 0 {
            return Err(Error::Format(
                "checkpoint has trailing bytes after the parameter blob".into(),
            ));
        }
        Ok(net)
    }
}
