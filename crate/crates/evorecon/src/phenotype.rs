//! Genotype-to-phenotype compiler: turns a [`Genome`] plus an input shape
//! into a validated, shape-annotated architecture graph.
//!
//! The decode is a pure function of (genome, input shape, decode seed). The
//! seed drives only the choice of layers receiving kernel elimination and
//! separation, so a genome's phenotype is reproducible independent of any
//! search history.
//!
//! Structure produced:
//!
//! - `2*g1` conv layers: encoder layers `1..=g1`, then mirrored decoder
//!   layers; the mirror slot of encoder layer 1 is the fixed output head
//!   (1x1 conv to one channel, linear).
//! - Pooling after the first `P` encoder layers, one upsampling node before
//!   each mirrored decoder position, so output spatial dims equal the input.
//! - Per-layer parallel conv branches (one per active kernel), concatenated
//!   and rescaled by a 1x1 conv when there is more than one branch.
//! - Concatenation skips on the shallowest mirror pairs, residual skips
//!   deepest-first on the remaining channel-compatible pairs.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::genome::Genome;
use crate::seeds::{rng_from, Fnv64};

/// Spatial/channel dims of a feature map (batch excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TensorShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        TensorShape {
            height,
            width,
            channels,
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Conv,
    SepConvPair,
    RescaleConv1x1,
    MaxPool2,
    AvgPool2,
    Upsample2,
    Concat,
    Add,
    Relu,
    OutputConv,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Conv => "CONV",
            NodeKind::SepConvPair => "SEP_CONV_PAIR",
            NodeKind::RescaleConv1x1 => "RESCALE_CONV_1x1",
            NodeKind::MaxPool2 => "MAX_POOL_2",
            NodeKind::AvgPool2 => "AVG_POOL_2",
            NodeKind::Upsample2 => "UPSAMPLE_2",
            NodeKind::Concat => "CONCAT",
            NodeKind::Add => "ADD",
            NodeKind::Relu => "RELU",
            NodeKind::OutputConv => "OUTPUT_CONV",
        }
    }

    /// Kinds that carry learnable parameters.
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            NodeKind::Conv | NodeKind::SepConvPair | NodeKind::RescaleConv1x1 | NodeKind::OutputConv
        )
    }
}

/// One node of the compiled graph. `inputs` are node ids of predecessors;
/// an empty list means the node consumes the graph input (exactly one node
/// does).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: usize,
    pub kind: NodeKind,
    /// Kernel side for conv kinds: k for CONV, the separated side for
    /// SEP_CONV_PAIR, 1 for rescale/output convs. None otherwise.
    pub kernel: Option<u8>,
    pub c_in: usize,
    pub c_out: usize,
    pub inputs: Vec<usize>,
}

/// Branch content of one conv layer: kernel side plus whether the branch is
/// a separated (n,1)+(1,n) cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct BranchSpec {
    pub kernel: u8,
    pub separated: bool,
}

#[derive(Debug, Error)]
pub enum PhenotypeError {
    #[error("invalid genome: {0:?}")]
    InvalidGenome(Vec<crate::genome::Violation>),
    #[error("input {0} unsupported: spatial dims must be powers of two >= 8 with one channel")]
    BadInput(TensorShape),
    #[error("node {node}: {message}")]
    Shape { node: usize, message: String },
    #[error("graph structure: {0}")]
    Structure(String),
}

/// Compiled architecture: nodes in topological order with inferred shapes
/// and the layer metadata needed for the mirror-symmetry certificate.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchGraph {
    nodes: Vec<NodeSpec>,
    input_shape: TensorShape,
    shapes: Vec<TensorShape>,
    /// Branch spec of each surviving encoder layer, shallow to deep, sorted.
    encoder_layers: Vec<Vec<BranchSpec>>,
    /// Branch spec of each real decoder layer in graph order (mirrors of
    /// encoder layers m..2). The mirror slot of encoder layer 1 is the head.
    decoder_layers: Vec<Vec<BranchSpec>>,
    pool_count: usize,
    concat_pairs: Vec<usize>,
    add_pairs: Vec<usize>,
    first_channels: usize,
    genome_digest: u64,
    decode_seed: u64,
}

impl ArchGraph {
    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn shapes(&self) -> &[TensorShape] {
        &self.shapes
    }

    pub fn shape_of(&self, id: usize) -> TensorShape {
        self.shapes[id]
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn output_id(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn output_shape(&self) -> TensorShape {
        self.shapes[self.output_id()]
    }

    pub fn pool_count(&self) -> usize {
        self.pool_count
    }

    /// Mirror pair indices (1-based, shallow first) carrying concat skips.
    pub fn concat_pairs(&self) -> &[usize] {
        &self.concat_pairs
    }

    /// Mirror pair indices carrying residual skips.
    pub fn add_pairs(&self) -> &[usize] {
        &self.add_pairs
    }

    /// Number of conv layers (encoder layers + real decoder layers + head).
    pub fn layer_count(&self) -> usize {
        self.encoder_layers.len() + self.decoder_layers.len() + 1
    }

    pub fn encoder_layers(&self) -> &[Vec<BranchSpec>] {
        &self.encoder_layers
    }

    pub fn decoder_layers(&self) -> &[Vec<BranchSpec>] {
        &self.decoder_layers
    }

    pub fn first_channels(&self) -> usize {
        self.first_channels
    }

    pub fn genome_digest(&self) -> u64 {
        self.genome_digest
    }

    pub fn decode_seed(&self) -> u64 {
        self.decode_seed
    }

    /// Smallest feature-map shape in the graph (the encoder bottleneck).
    pub fn bottleneck_shape(&self) -> TensorShape {
        self.shapes
            .iter()
            .copied()
            .min_by_key(|s| (s.height * s.width, s.channels))
            .unwrap_or(self.input_shape)
    }

    /// Canonical UTF-8 listing: one node per line,
    /// `id kind kernel c_in c_out <- input_ids`.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let kernel = n
                .kernel
                .map(|k| k.to_string())
                .unwrap_or_else(|| "-".to_string());
            let inputs = if n.inputs.is_empty() {
                "input".to_string()
            } else {
                n.inputs
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            out.push_str(&format!(
                "{} {} {} {} {} <- {}\n",
                n.id,
                n.kind.name(),
                kernel,
                n.c_in,
                n.c_out,
                inputs
            ));
        }
        out
    }

    /// Stable 64-bit structural digest. The training optimizer gene is not
    /// part of the graph, so genomes differing only there collide on purpose.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update(self.export_text().as_bytes());
        h.update(format!("input {}", self.input_shape).as_bytes());
        h.finish()
    }

    /// Structural certificate: mirror symmetry of branch specs, pooling and
    /// upsampling balance, head shape, and spatial identity of the output.
    pub fn verify_structure(&self) -> Result<(), PhenotypeError> {
        let m = self.encoder_layers.len();
        if self.decoder_layers.len() + 1 != m {
            return Err(PhenotypeError::Structure(format!(
                "{} encoder layers vs {} decoder layers",
                m,
                self.decoder_layers.len()
            )));
        }
        // Decoder layer at position p mirrors encoder layer m - p.
        for (p, dec) in self.decoder_layers.iter().enumerate() {
            let enc = &self.encoder_layers[m - 1 - p];
            if enc != dec {
                return Err(PhenotypeError::Structure(format!(
                    "mirror mismatch: encoder layer {} {:?} vs decoder {:?}",
                    m - p,
                    enc,
                    dec
                )));
            }
        }
        let pools = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::MaxPool2 | NodeKind::AvgPool2))
            .count();
        let ups = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Upsample2)
            .count();
        if pools != self.pool_count || ups != self.pool_count {
            return Err(PhenotypeError::Structure(format!(
                "pool/upsample imbalance: {pools} pools, {ups} upsamples, expected {}",
                self.pool_count
            )));
        }
        let head = self.nodes.last().expect("graph is nonempty");
        if head.kind != NodeKind::OutputConv || head.c_out != 1 || head.kernel != Some(1) {
            return Err(PhenotypeError::Structure(
                "final node is not a 1x1 single-channel output conv".to_string(),
            ));
        }
        let out = self.output_shape();
        if out.height != self.input_shape.height
            || out.width != self.input_shape.width
            || out.channels != 1
        {
            return Err(PhenotypeError::Structure(format!(
                "output shape {out} does not match input {}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Assemble a graph from hand-built nodes, running shape inference and
    /// structural validation. Intended for tests and tooling; `compile` is
    /// the normal entry point.
    pub fn from_nodes(
        nodes: Vec<NodeSpec>,
        input_shape: TensorShape,
    ) -> Result<ArchGraph, PhenotypeError> {
        let shapes = infer_shapes(&nodes, input_shape)?;
        Ok(ArchGraph {
            nodes,
            input_shape,
            shapes,
            encoder_layers: Vec::new(),
            decoder_layers: Vec::new(),
            pool_count: 0,
            concat_pairs: Vec::new(),
            add_pairs: Vec::new(),
            first_channels: 0,
            genome_digest: 0,
            decode_seed: 0,
        })
    }
}

/// Integer round-half-up of `pct`% of `count`.
fn pct_of(pct: u8, count: usize) -> usize {
    (pct as usize * count + 50) / 100
}

fn pooling_cap(shape: TensorShape) -> usize {
    // Bottleneck floor of 4x4: at most log2(min(H,W)/4) pooling stages.
    let side = shape.height.min(shape.width);
    (side / 4).ilog2() as usize
}

/// Per-layer branch plan after elimination and separation.
struct LayerPlan {
    /// Sorted branch specs of each surviving layer, shallow to deep.
    layers: Vec<Vec<BranchSpec>>,
}

fn plan_layers(genome: &Genome, decode_seed: u64) -> LayerPlan {
    let g1 = genome.half_layers as usize;
    let mut rng = rng_from(decode_seed);

    let elim_count = pct_of(genome.elim_layer_pct, g1);
    let elim_layers: BTreeSet<usize> =
        sample_without_replacement(&mut rng, g1, elim_count).into_iter().collect();
    let sep_count = pct_of(genome.sep_layer_pct, g1);
    let sep_layers: BTreeSet<usize> =
        sample_without_replacement(&mut rng, g1, sep_count).into_iter().collect();

    let removed = genome.elim_mask.intersect(genome.kernel_set);
    let separated = genome.sep_mask.intersect(genome.kernel_set);

    let mut layers: Vec<Vec<BranchSpec>> = Vec::with_capacity(g1);
    for idx in 0..g1 {
        let mut branches: Vec<BranchSpec> = genome
            .kernel_set
            .kernels()
            .filter(|&k| !(elim_layers.contains(&idx) && removed.contains(k)))
            .map(|k| BranchSpec {
                kernel: k,
                separated: sep_layers.contains(&idx) && separated.contains(k),
            })
            .collect();
        branches.sort();
        layers.push(branches);
    }

    if layers.iter().all(|l| l.is_empty()) {
        // Elimination floor: at least one layer pair must survive. The
        // shallowest layer is restored with its full kernel set.
        layers[0] = genome
            .kernel_set
            .kernels()
            .map(|k| BranchSpec {
                kernel: k,
                separated: sep_layers.contains(&0) && separated.contains(k),
            })
            .collect();
        layers[0].sort();
    }
    layers.retain(|l| !l.is_empty());
    LayerPlan { layers }
}

fn sample_without_replacement<R: Rng>(rng: &mut R, n: usize, amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, amount.min(n)).into_vec()
}

/// Builder state for emitting nodes.
struct GraphBuilder {
    nodes: Vec<NodeSpec>,
}

impl GraphBuilder {
    fn push(&mut self, kind: NodeKind, kernel: Option<u8>, c_in: usize, c_out: usize, inputs: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(NodeSpec {
            id,
            kind,
            kernel,
            c_in,
            c_out,
            inputs,
        });
        id
    }

    /// Emit one conv layer: parallel branches, each followed by RELU; multi
    /// branch layers concat and rescale back to the target channel count.
    /// Returns (layer output id, output channels).
    fn push_layer(
        &mut self,
        branches: &[BranchSpec],
        input: Option<usize>,
        c_in: usize,
        target: usize,
    ) -> usize {
        let input_ids: Vec<usize> = input.into_iter().collect();
        let mut branch_outs = Vec::with_capacity(branches.len());
        for b in branches {
            let kind = if b.separated {
                NodeKind::SepConvPair
            } else {
                NodeKind::Conv
            };
            let conv = self.push(kind, Some(b.kernel), c_in, target, input_ids.clone());
            let relu = self.push(NodeKind::Relu, None, target, target, vec![conv]);
            branch_outs.push(relu);
        }
        if branch_outs.len() == 1 {
            branch_outs[0]
        } else {
            let stacked = target * branch_outs.len();
            let cat = self.push(NodeKind::Concat, None, stacked, stacked, branch_outs);
            let rescale = self.push(NodeKind::RescaleConv1x1, Some(1), stacked, target, vec![cat]);
            self.push(NodeKind::Relu, None, target, target, vec![rescale])
        }
    }
}

/// Compile a genome into an architecture graph.
///
/// Deterministic: identical (genome, input, decode_seed) produce identical
/// graphs. Every valid genome compiles; the only error on valid genomes is
/// an unsupported input shape.
pub fn compile(
    genome: &Genome,
    input: TensorShape,
    decode_seed: u64,
) -> Result<ArchGraph, PhenotypeError> {
    let violations = genome.validate();
    if !violations.is_empty() {
        return Err(PhenotypeError::InvalidGenome(violations));
    }
    if input.channels != 1
        || input.height < 8
        || input.width < 8
        || !input.height.is_power_of_two()
        || !input.width.is_power_of_two()
    {
        return Err(PhenotypeError::BadInput(input));
    }

    let plan = plan_layers(genome, decode_seed);
    let m = plan.layers.len();
    let g1 = genome.half_layers as usize;
    let g12 = genome.first_channels as usize;

    let pool_count = (genome.pool_request as usize).min(m).min(pooling_cap(input));
    let avg_pools = pct_of(genome.avg_pool_pct, pool_count);

    // Pair j in 1..=m joins encoder layer j with its mirror (the head for
    // j = 1). Concat skips take the shallowest pairs.
    let concat_count = pct_of(genome.concat_pct, g1).min(m);
    let concat_pairs: Vec<usize> = (1..=concat_count).collect();
    // Residual skips need matching channel counts, which holds exactly for
    // the deepest pair and for pairs below the pooling region.
    let mut add_pairs: Vec<usize> = (1..=m)
        .rev()
        .filter(|&j| (j == m || j > pool_count) && !concat_pairs.contains(&j))
        .take(pct_of(genome.residual_pct, g1))
        .collect();
    add_pairs.sort_unstable();

    let depth_of = |j: usize| (j - 1).min(pool_count);
    let target_of = |j: usize| g12 << depth_of(j);

    let mut b = GraphBuilder { nodes: Vec::new() };
    let mut cursor: Option<usize> = None;
    let mut cur_channels = input.channels;
    let mut encoder_out: Vec<usize> = vec![0; m + 1];

    for j in 1..=m {
        let target = target_of(j);
        let out = b.push_layer(&plan.layers[j - 1], cursor, cur_channels, target);
        encoder_out[j] = out;
        cur_channels = target;
        cursor = Some(out);
        if j <= pool_count {
            // Average pooling occupies the deepest slots.
            let kind = if j > pool_count - avg_pools {
                NodeKind::AvgPool2
            } else {
                NodeKind::MaxPool2
            };
            cursor = Some(b.push(kind, None, cur_channels, cur_channels, vec![out]));
        }
    }

    let mut decoder_layers = Vec::with_capacity(m.saturating_sub(1));
    for j in (1..=m).rev() {
        if j <= pool_count {
            let id = b.push(
                NodeKind::Upsample2,
                None,
                cur_channels,
                cur_channels,
                vec![cursor.expect("decoder follows encoder")],
            );
            cursor = Some(id);
        }
        let cur = cursor.expect("decoder follows encoder");
        if concat_pairs.contains(&j) {
            let skip = encoder_out[j];
            let skip_channels = b.nodes[skip].c_out;
            let stacked = cur_channels + skip_channels;
            let cat = b.push(NodeKind::Concat, None, stacked, stacked, vec![cur, skip]);
            let rescale = b.push(NodeKind::RescaleConv1x1, Some(1), stacked, cur_channels, vec![cat]);
            cursor = Some(b.push(NodeKind::Relu, None, cur_channels, cur_channels, vec![rescale]));
        } else if add_pairs.contains(&j) {
            let skip = encoder_out[j];
            cursor = Some(b.push(NodeKind::Add, None, cur_channels, cur_channels, vec![cur, skip]));
        }
        if j > 1 {
            let target = target_of(j);
            let out = b.push_layer(&plan.layers[j - 1], cursor, cur_channels, target);
            decoder_layers.push(plan.layers[j - 1].clone());
            cur_channels = target;
            cursor = Some(out);
        } else {
            // Mirror slot of encoder layer 1: the fixed linear output head.
            b.push(
                NodeKind::OutputConv,
                Some(1),
                cur_channels,
                1,
                vec![cursor.expect("head follows decoder")],
            );
        }
    }

    let shapes = infer_shapes(&b.nodes, input)?;
    let graph = ArchGraph {
        nodes: b.nodes,
        input_shape: input,
        shapes,
        encoder_layers: plan.layers,
        decoder_layers,
        pool_count,
        concat_pairs,
        add_pairs,
        first_channels: g12,
        genome_digest: genome.digest(),
        decode_seed,
    };
    graph.verify_structure()?;
    Ok(graph)
}

/// Shape inference over a topologically ordered node list. Verifies channel
/// agreement for convs, shape equality for ADD, spatial equality for CONCAT,
/// and even spatial dims for pooling. Errors name the offending node and
/// the mismatching shapes.
pub fn infer_shapes(
    nodes: &[NodeSpec],
    input: TensorShape,
) -> Result<Vec<TensorShape>, PhenotypeError> {
    if nodes.is_empty() {
        return Err(PhenotypeError::Structure("empty graph".to_string()));
    }
    // Nodes with no predecessors read the graph input; the first layer may
    // hold several such branch convs, but at least one must exist.
    if !nodes.iter().any(|n| n.inputs.is_empty()) {
        return Err(PhenotypeError::Structure(
            "no node consumes the graph input".to_string(),
        ));
    }
    let mut consumed = vec![false; nodes.len()];
    let mut shapes: Vec<TensorShape> = Vec::with_capacity(nodes.len());
    for (idx, node) in nodes.iter().enumerate() {
        if node.id != idx {
            return Err(PhenotypeError::Structure(format!(
                "node ids must be dense and ascending; found {} at position {idx}",
                node.id
            )));
        }
        for &i in &node.inputs {
            if i >= idx {
                return Err(PhenotypeError::Structure(format!(
                    "node {idx} references non-preceding node {i}"
                )));
            }
            consumed[i] = true;
        }
        let in_shapes: Vec<TensorShape> = if node.inputs.is_empty() {
            vec![input]
        } else {
            node.inputs.iter().map(|&i| shapes[i]).collect()
        };
        let shape = infer_node(node, &in_shapes)?;
        shapes.push(shape);
    }
    let sinks = (0..nodes.len()).filter(|&i| !consumed[i]).count();
    if sinks != 1 {
        return Err(PhenotypeError::Structure(format!(
            "expected exactly one output node, found {sinks}"
        )));
    }
    Ok(shapes)
}

fn infer_node(node: &NodeSpec, inputs: &[TensorShape]) -> Result<TensorShape, PhenotypeError> {
    let id = node.id;
    let arity_one = |inputs: &[TensorShape]| -> Result<TensorShape, PhenotypeError> {
        if inputs.len() != 1 {
            return Err(PhenotypeError::Shape {
                node: id,
                message: format!("{} expects one input, got {}", node.kind.name(), inputs.len()),
            });
        }
        Ok(inputs[0])
    };
    match node.kind {
        NodeKind::Conv | NodeKind::SepConvPair | NodeKind::RescaleConv1x1 | NodeKind::OutputConv => {
            let x = arity_one(inputs)?;
            if x.channels != node.c_in {
                return Err(PhenotypeError::Shape {
                    node: id,
                    message: format!(
                        "conv expects {} input channels, got {x}",
                        node.c_in
                    ),
                });
            }
            Ok(TensorShape::new(x.height, x.width, node.c_out))
        }
        NodeKind::MaxPool2 | NodeKind::AvgPool2 => {
            let x = arity_one(inputs)?;
            if x.height % 2 != 0 || x.width % 2 != 0 {
                return Err(PhenotypeError::Shape {
                    node: id,
                    message: format!("pooling requires even spatial dims, got {x}"),
                });
            }
            Ok(TensorShape::new(x.height / 2, x.width / 2, x.channels))
        }
        NodeKind::Upsample2 => {
            let x = arity_one(inputs)?;
            Ok(TensorShape::new(x.height * 2, x.width * 2, x.channels))
        }
        NodeKind::Relu => arity_one(inputs),
        NodeKind::Add => {
            if inputs.len() < 2 {
                return Err(PhenotypeError::Shape {
                    node: id,
                    message: "ADD needs at least two inputs".to_string(),
                });
            }
            let first = inputs[0];
            for &s in &inputs[1..] {
                if s != first {
                    return Err(PhenotypeError::Shape {
                        node: id,
                        message: format!("ADD inputs differ: {first} vs {s}"),
                    });
                }
            }
            Ok(first)
        }
        NodeKind::Concat => {
            if inputs.len() < 2 {
                return Err(PhenotypeError::Shape {
                    node: id,
                    message: "CONCAT needs at least two inputs".to_string(),
                });
            }
            let first = inputs[0];
            let mut channels = 0;
            for &s in inputs {
                if s.height != first.height || s.width != first.width {
                    return Err(PhenotypeError::Shape {
                        node: id,
                        message: format!("CONCAT spatial mismatch: {first} vs {s}"),
                    });
                }
                channels += s.channels;
            }
            Ok(TensorShape::new(first.height, first.width, channels))
        }
    }
}
