//! Static analysis of compiled graphs: FLOPs, learnable parameters, and a
//! summary report.
//!
//! FLOPs follow the per-conv product convention
//! `W_out * H_out * C_in * C_out * K_w * K_h` (one count per
//! multiply-accumulate, no doubling); pooling, upsampling, concat, add, and
//! activations contribute zero. A separated pair counts both cascaded convs.

use std::fmt;

use crate::phenotype::{ArchGraph, NodeKind, TensorShape};

/// Kernel extents (K_h, K_w) of the one or two convolutions a node carries.
fn conv_kernels(kind: NodeKind, kernel: u8) -> Vec<(usize, usize)> {
    let k = kernel as usize;
    match kind {
        NodeKind::Conv => vec![(k, k)],
        NodeKind::SepConvPair => vec![(k, 1), (1, k)],
        NodeKind::RescaleConv1x1 | NodeKind::OutputConv => vec![(1, 1)],
        _ => Vec::new(),
    }
}

/// Channel counts (C_in, C_out) per carried conv. The separated cascade's
/// intermediate channel count equals the branch output count.
fn conv_channels(kind: NodeKind, c_in: usize, c_out: usize) -> Vec<(usize, usize)> {
    match kind {
        NodeKind::SepConvPair => vec![(c_in, c_out), (c_out, c_out)],
        k if k.is_conv() => vec![(c_in, c_out)],
        _ => Vec::new(),
    }
}

/// Sum of the conv-product FLOPs over all conv-kind nodes.
pub fn count_flops(graph: &ArchGraph) -> u64 {
    let mut total = 0u64;
    for node in graph.nodes() {
        if !node.kind.is_conv() {
            continue;
        }
        let out = graph.shape_of(node.id);
        let kernel = node.kernel.expect("conv nodes carry a kernel");
        let kernels = conv_kernels(node.kind, kernel);
        let channels = conv_channels(node.kind, node.c_in, node.c_out);
        for ((kh, kw), (ci, co)) in kernels.into_iter().zip(channels) {
            total += (out.width * out.height * ci * co * kw * kh) as u64;
        }
    }
    total
}

/// Learnable parameters: per conv `K_w * K_h * C_in * C_out + C_out`
/// (bias included), both cascaded convs for separated pairs.
pub fn count_params(graph: &ArchGraph) -> u64 {
    let mut total = 0u64;
    for node in graph.nodes() {
        if !node.kind.is_conv() {
            continue;
        }
        let kernel = node.kernel.expect("conv nodes carry a kernel");
        let kernels = conv_kernels(node.kind, kernel);
        let channels = conv_channels(node.kind, node.c_in, node.c_out);
        for ((kh, kw), (ci, co)) in kernels.into_iter().zip(channels) {
            total += (kw * kh * ci * co + co) as u64;
        }
    }
    total
}

/// Structural and cost summary of a compiled graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub input_shape: TensorShape,
    pub conv_layers: usize,
    pub pool_stages: usize,
    pub concat_skips: usize,
    pub residual_skips: usize,
    pub node_count: usize,
    pub bottleneck: TensorShape,
    pub flops: u64,
    pub params: u64,
}

pub fn summarize(graph: &ArchGraph) -> Summary {
    Summary {
        input_shape: graph.input_shape(),
        conv_layers: graph.layer_count(),
        pool_stages: graph.pool_count(),
        concat_skips: graph.concat_pairs().len(),
        residual_skips: graph.add_pairs().len(),
        node_count: graph.nodes().len(),
        bottleneck: graph.bottleneck_shape(),
        flops: count_flops(graph),
        params: count_params(graph),
    }
}

impl Summary {
    /// Machine-readable key-value form, one `key = value` per line.
    pub fn to_key_value(&self) -> String {
        format!(
            "input = {}\nconv_layers = {}\npool_stages = {}\nconcat_skips = {}\nresidual_skips = {}\nnodes = {}\nbottleneck = {}\nflops = {}\nparams = {}\n",
            self.input_shape,
            self.conv_layers,
            self.pool_stages,
            self.concat_skips,
            self.residual_skips,
            self.node_count,
            self.bottleneck,
            self.flops,
            self.params,
        )
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {}", "input", self.input_shape)?;
        writeln!(f, "{:<16} {}", "conv layers", self.conv_layers)?;
        writeln!(f, "{:<16} {}", "pool stages", self.pool_stages)?;
        writeln!(f, "{:<16} {}", "concat skips", self.concat_skips)?;
        writeln!(f, "{:<16} {}", "residual skips", self.residual_skips)?;
        writeln!(f, "{:<16} {}", "nodes", self.node_count)?;
        writeln!(f, "{:<16} {}", "bottleneck", self.bottleneck)?;
        writeln!(f, "{:<16} {}", "flops", self.flops)?;
        writeln!(f, "{:<16} {}", "params", self.params)?;
        // Cost accounting covers convolution nodes only.
        writeln!(f, "flops = sum over convs of W*H*Cin*Cout*Kw*Kh; other nodes count 0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{random_genome, Genome, KernelSet, OptimizerKind};
    use crate::phenotype::{compile, NodeSpec};
    use crate::seeds::rng_from;

    fn graph_of(nodes: Vec<NodeSpec>, h: usize, w: usize) -> ArchGraph {
        ArchGraph::from_nodes(nodes, TensorShape::new(h, w, 1)).unwrap()
    }

    #[test]
    fn single_conv_flops_product() {
        // 3x3 conv on an 8x8 map, 2 -> 4 channels.
        let nodes = vec![
            NodeSpec {
                id: 0,
                kind: NodeKind::Conv,
                kernel: Some(1),
                c_in: 1,
                c_out: 2,
                inputs: vec![],
            },
            NodeSpec {
                id: 1,
                kind: NodeKind::Conv,
                kernel: Some(3),
                c_in: 2,
                c_out: 4,
                inputs: vec![0],
            },
        ];
        let g = graph_of(nodes, 8, 8);
        let lead = 8 * 8 * 1 * 2; // the 1x1 feed conv
        assert_eq!(count_flops(&g), (lead + 4608) as u64);
    }

    #[test]
    fn separated_pair_counts_both_cascades() {
        let nodes = vec![
            NodeSpec {
                id: 0,
                kind: NodeKind::Conv,
                kernel: Some(1),
                c_in: 1,
                c_out: 2,
                inputs: vec![],
            },
            NodeSpec {
                id: 1,
                kind: NodeKind::SepConvPair,
                kernel: Some(3),
                c_in: 2,
                c_out: 4,
                inputs: vec![0],
            },
        ];
        let g = graph_of(nodes, 8, 8);
        let lead = (8 * 8 * 2) as u64;
        // (3,1): 8*8*2*4*3*1 = 1536, then (1,3): 8*8*4*4*1*3 = 3072.
        assert_eq!(count_flops(&g) - lead, 1536 + 3072);
        assert_eq!(count_flops(&g) - lead, 4608);
    }

    #[test]
    fn output_only_graph_is_sixty_four_flops() {
        let nodes = vec![NodeSpec {
            id: 0,
            kind: NodeKind::OutputConv,
            kernel: Some(1),
            c_in: 1,
            c_out: 1,
            inputs: vec![],
        }];
        let g = graph_of(nodes, 8, 8);
        assert_eq!(count_flops(&g), 64);
        assert_eq!(count_params(&g), 2); // 1 weight + 1 bias
    }

    #[test]
    fn param_counts_match_hand_arithmetic() {
        let nodes = vec![
            NodeSpec {
                id: 0,
                kind: NodeKind::Conv,
                kernel: Some(3),
                c_in: 2,
                c_out: 4,
                inputs: vec![],
            },
            NodeSpec {
                id: 1,
                kind: NodeKind::OutputConv,
                kernel: Some(1),
                c_in: 4,
                c_out: 1,
                inputs: vec![0],
            },
        ];
        let g = ArchGraph::from_nodes(nodes, TensorShape::new(8, 8, 2)).unwrap();
        assert_eq!(count_params(&g), 76 + 5);
    }

    /// Independent per-node walker used as the additivity oracle.
    fn walker_params(graph: &ArchGraph) -> u64 {
        graph
            .nodes()
            .iter()
            .map(|n| match n.kind {
                NodeKind::Conv => {
                    let k = n.kernel.unwrap() as u64;
                    k * k * n.c_in as u64 * n.c_out as u64 + n.c_out as u64
                }
                NodeKind::SepConvPair => {
                    let k = n.kernel.unwrap() as u64;
                    let (ci, cm, co) = (n.c_in as u64, n.c_out as u64, n.c_out as u64);
                    (k * ci * cm + cm) + (k * cm * co + co)
                }
                NodeKind::RescaleConv1x1 | NodeKind::OutputConv => {
                    n.c_in as u64 * n.c_out as u64 + n.c_out as u64
                }
                _ => 0,
            })
            .sum()
    }

    fn walker_flops(graph: &ArchGraph) -> u64 {
        graph
            .nodes()
            .iter()
            .map(|n| {
                let s = graph.shape_of(n.id);
                let hw = (s.height * s.width) as u64;
                match n.kind {
                    NodeKind::Conv => {
                        let k = n.kernel.unwrap() as u64;
                        hw * n.c_in as u64 * n.c_out as u64 * k * k
                    }
                    NodeKind::SepConvPair => {
                        let k = n.kernel.unwrap() as u64;
                        let (ci, cm, co) = (n.c_in as u64, n.c_out as u64, n.c_out as u64);
                        hw * ci * cm * k + hw * cm * co * k
                    }
                    NodeKind::RescaleConv1x1 | NodeKind::OutputConv => {
                        hw * n.c_in as u64 * n.c_out as u64
                    }
                    _ => 0,
                }
            })
            .sum()
    }

    #[test]
    fn walker_oracle_agrees_on_fuzzed_graphs() {
        let mut rng = rng_from(77);
        for i in 0..200 {
            let g = random_genome(&mut rng);
            let graph = compile(&g, TensorShape::new(32, 32, 1), i).unwrap();
            assert_eq!(count_params(&graph), walker_params(&graph));
            assert_eq!(count_flops(&graph), walker_flops(&graph));
        }
    }

    #[test]
    fn separation_saves_params_when_channel_condition_holds() {
        // K^2*Cin*Cout >= K*Cin*Cmid + K*Cmid*Cout with Cmid = Cout requires
        // Cout <= (K-1)*Cin; check it on the engine's actual channel choices.
        let mut rng = rng_from(88);
        for i in 0..200 {
            let mut g = random_genome(&mut rng);
            g.sep_layer_pct = 100;
            g.sep_mask = g.kernel_set;
            let graph = compile(&g, TensorShape::new(32, 32, 1), i).unwrap();
            for n in graph.nodes() {
                if n.kind != NodeKind::SepConvPair {
                    continue;
                }
                let k = n.kernel.unwrap() as u64;
                let (ci, co) = (n.c_in as u64, n.c_out as u64);
                // Weight-count inequality; holds exactly when (K-1)*Cin >= Cout.
                if co <= (k - 1) * ci {
                    let square = k * k * ci * co;
                    let cascade = k * ci * co + k * co * co;
                    assert!(
                        cascade <= square,
                        "separation grew weights: k={k} ci={ci} co={co}"
                    );
                }
            }
        }
    }

    #[test]
    fn added_elimination_never_increases_params() {
        // Adding a kernel to the elimination mask (same decode seed, same
        // chosen layers) can only shrink the graph, unless the all-branches
        // floor restores a full layer; skip those cases.
        let mut rng = rng_from(99);
        let mut checked = 0;
        for i in 0..400 {
            let mut g = random_genome(&mut rng);
            g.elim_layer_pct = 100;
            let Some(first) = g.kernel_set.kernels().next() else {
                continue;
            };
            g.elim_mask = KernelSet::empty();
            let baseline = compile(&g, TensorShape::new(32, 32, 1), i).unwrap();
            g.elim_mask = KernelSet::from_kernels(&[first]).unwrap();
            let eliminated = compile(&g, TensorShape::new(32, 32, 1), i).unwrap();
            if g.kernel_set.len() == 1 {
                continue; // floor case: whole kernel set eliminated
            }
            checked += 1;
            assert!(
                count_params(&eliminated) <= count_params(&baseline),
                "elimination increased params for {g:?}"
            );
        }
        assert!(checked > 100);
    }

    #[test]
    fn summary_has_stable_key_value_form() {
        let g = Genome {
            half_layers: 1,
            kernel_set: KernelSet::from_kernels(&[3]).unwrap(),
            pool_request: 0,
            avg_pool_pct: 0,
            concat_pct: 0,
            residual_pct: 0,
            elim_mask: KernelSet::empty(),
            elim_layer_pct: 0,
            sep_mask: KernelSet::empty(),
            sep_layer_pct: 0,
            optimizer: OptimizerKind::Adam,
            first_channels: 4,
        };
        let graph = compile(&g, TensorShape::new(32, 32, 1), 0).unwrap();
        let s = summarize(&graph);
        assert_eq!(s.flops, 32 * 32 * 4 * 9 + 32 * 32 * 4);
        assert_eq!(s.params, 40 + 5);
        assert_eq!(s.conv_layers, 2);
        let kv = s.to_key_value();
        assert!(kv.contains("flops = 40960"));
        assert!(kv.contains("params = 45"));
    }
}
