//! The 12-gene architecture encoding.
//!
//! A genome fixes everything the compiler needs to build a network: depth,
//! per-layer kernel mix, pooling, skip structure, kernel elimination and
//! separation, the training optimizer, and the first-layer channel count.
//! Genes are independent of each other by construction, so single-point
//! crossover and per-gene mutation always stay inside the feasible set.

use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Square kernel side lengths available to gene 2 (and referenced by the
/// gene 7/9 position masks, in this order).
pub const KERNEL_CHOICES: [u8; 4] = [3, 5, 7, 9];

/// Gene 1 upper bound: total conv layers L = 2 * g1 with L in 2..=30.
pub const MAX_HALF_LAYERS: u8 = 15;

/// Gene 12 upper bound on first-layer channels.
pub const MAX_FIRST_CHANNELS: u8 = 10;

/// Sampling bound for gene 3. The request is clamped again at decode time
/// against the depth and the image size (bottleneck floor of 4x4 pixels),
/// so larger stored values are legal, just never useful.
pub const MAX_POOL_REQUEST: u8 = 6;

/// Number of genes in a genome; crossover points live in 1..=GENE_COUNT-1.
pub const GENE_COUNT: usize = 12;

/// A subset of the four kernel choices, stored as a 4-bit mask ordered
/// (3, 5, 7, 9).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelSet(u8);

impl KernelSet {
    pub const fn empty() -> Self {
        KernelSet(0)
    }

    /// Build from the low 4 bits; higher bits are dropped.
    pub const fn from_bits(bits: u8) -> Self {
        KernelSet(bits & 0x0f)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub fn from_kernels(kernels: &[u8]) -> Result<Self, GenomeError> {
        let mut bits = 0u8;
        for &k in kernels {
            let pos = KERNEL_CHOICES
                .iter()
                .position(|&c| c == k)
                .ok_or_else(|| GenomeError::Parse {
                    field: "kernel",
                    message: format!("{k} is not one of 3,5,7,9"),
                })?;
            bits |= 1 << pos;
        }
        Ok(KernelSet(bits))
    }

    pub fn contains(self, kernel: u8) -> bool {
        KERNEL_CHOICES
            .iter()
            .position(|&c| c == kernel)
            .map(|p| self.0 & (1 << p) != 0)
            .unwrap_or(false)
    }

    pub fn kernels(self) -> impl Iterator<Item = u8> {
        KERNEL_CHOICES
            .into_iter()
            .enumerate()
            .filter(move |(i, _)| self.0 & (1 << i) != 0)
            .map(|(_, k)| k)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersect(self, other: KernelSet) -> KernelSet {
        KernelSet(self.0 & other.0)
    }

    /// 4-character bit string ordered (3, 5, 7, 9), e.g. "1010" = {3, 7}.
    pub fn bitstring(self) -> String {
        (0..4)
            .map(|i| if self.0 & (1 << i) != 0 { '1' } else { '0' })
            .collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self, GenomeError> {
        if s.len() != 4 || !s.bytes().all(|b| b == b'0' || b == b'1') {
            return Err(GenomeError::Parse {
                field: "mask",
                message: format!("expected a 4-character bit string, got `{s}`"),
            });
        }
        let mut bits = 0u8;
        for (i, b) in s.bytes().enumerate() {
            if b == b'1' {
                bits |= 1 << i;
            }
        }
        Ok(KernelSet(bits))
    }

    /// Comma list of the contained kernels, e.g. "3,5,9".
    pub fn comma_list(self) -> String {
        let parts: Vec<String> = self.kernels().map(|k| k.to_string()).collect();
        parts.join(",")
    }
}

impl fmt::Debug for KernelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KernelSet({{{}}})", self.comma_list())
    }
}

/// Gene 11: the optimizer used to train the decoded network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    Sgd,
    RmsProp,
    Adagrad,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Adam,
        OptimizerKind::Sgd,
        OptimizerKind::RmsProp,
        OptimizerKind::Adagrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "ADAM",
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::RmsProp => "RMSPROP",
            OptimizerKind::Adagrad => "ADAGRAD",
        }
    }

    pub fn parse(s: &str) -> Result<Self, GenomeError> {
        match s.to_ascii_uppercase().as_str() {
            "ADAM" => Ok(OptimizerKind::Adam),
            "SGD" => Ok(OptimizerKind::Sgd),
            "RMSPROP" => Ok(OptimizerKind::RmsProp),
            "ADAGRAD" => Ok(OptimizerKind::Adagrad),
            other => Err(GenomeError::Parse {
                field: "g11",
                message: format!("unknown optimizer `{other}`"),
            }),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
            OptimizerKind::RmsProp => 2,
            OptimizerKind::Adagrad => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, GenomeError> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| GenomeError::Parse {
                field: "g11",
                message: format!("invalid optimizer code {code}"),
            })
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum GenomeError {
    #[error("{field}: {message}")]
    Parse { field: &'static str, message: String },
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("invalid genome: {}", violations_text(.0))]
    Invalid(Vec<Violation>),
}

fn violations_text(vs: &[Violation]) -> String {
    let parts: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
    parts.join("; ")
}

/// A single failed domain check, naming the offending gene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// The 12-gene genotype. Fields are listed in gene order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genome {
    /// Gene 1: half the total number of conv layers, 1..=15.
    pub half_layers: u8,
    /// Gene 2: nonempty set of square kernel sizes used by every layer.
    pub kernel_set: KernelSet,
    /// Gene 3: requested pooling slots; clamped at decode time.
    pub pool_request: u8,
    /// Gene 4: percent of pooling slots realized as average pooling.
    pub avg_pool_pct: u8,
    /// Gene 5: percent of gene 1 used as concatenation skips.
    pub concat_pct: u8,
    /// Gene 6: percent of gene 1 used as residual (summation) skips.
    pub residual_pct: u8,
    /// Gene 7: kernel positions to eliminate; interpreted as g7 & g2 at
    /// decode time so any bit pattern is legal.
    pub elim_mask: KernelSet,
    /// Gene 8: percent of gene 1 layers receiving elimination.
    pub elim_layer_pct: u8,
    /// Gene 9: kernel positions to separate into (n,1)+(1,n) cascades;
    /// interpreted as g9 & g2 at decode time.
    pub sep_mask: KernelSet,
    /// Gene 10: percent of gene 1 layers receiving separation.
    pub sep_layer_pct: u8,
    /// Gene 11: training optimizer.
    pub optimizer: OptimizerKind,
    /// Gene 12: channels of the first layer, 1..=10; doubles per pooling.
    pub first_channels: u8,
}

impl Genome {
    /// Domain checks. Empty result means the genome is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(1..=MAX_HALF_LAYERS).contains(&self.half_layers) {
            out.push(Violation {
                field: "g1",
                message: format!("{} out of [1,{}]", self.half_layers, MAX_HALF_LAYERS),
            });
        }
        if self.kernel_set.is_empty() {
            out.push(Violation {
                field: "g2",
                message: "kernel set empty".to_string(),
            });
        }
        for (field, value) in [
            ("g4", self.avg_pool_pct),
            ("g5", self.concat_pct),
            ("g6", self.residual_pct),
            ("g8", self.elim_layer_pct),
            ("g10", self.sep_layer_pct),
        ] {
            if value > 100 {
                out.push(Violation {
                    field,
                    message: format!("{value} out of [0,100]"),
                });
            }
        }
        if !(1..=MAX_FIRST_CHANNELS).contains(&self.first_channels) {
            out.push(Violation {
                field: "g12",
                message: format!("{} out of [1,{}]", self.first_channels, MAX_FIRST_CHANNELS),
            });
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Stable digest of the genome (over its text form).
    pub fn digest(&self) -> u64 {
        crate::seeds::fnv1a64(self.to_text().as_bytes())
    }

    /// Human-readable `key = value` serialization, one gene per line.
    pub fn to_text(&self) -> String {
        format!(
            "g1 = {}\ng2 = {}\ng3 = {}\ng4 = {}\ng5 = {}\ng6 = {}\ng7 = {}\ng8 = {}\ng9 = {}\ng10 = {}\ng11 = {}\ng12 = {}\n",
            self.half_layers,
            self.kernel_set.comma_list(),
            self.pool_request,
            self.avg_pool_pct,
            self.concat_pct,
            self.residual_pct,
            self.elim_mask.bitstring(),
            self.elim_layer_pct,
            self.sep_mask.bitstring(),
            self.sep_layer_pct,
            self.optimizer,
            self.first_channels,
        )
    }

    /// Parse the `to_text` format. Every gene must be present, in-domain,
    /// and no unknown keys are accepted.
    pub fn from_text(text: &str) -> Result<Self, GenomeError> {
        const FIELDS: [&str; GENE_COUNT] = [
            "g1", "g2", "g3", "g4", "g5", "g6", "g7", "g8", "g9", "g10", "g11", "g12",
        ];
        let mut values: [Option<&str>; GENE_COUNT] = [None; GENE_COUNT];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| GenomeError::Parse {
                field: "genome",
                message: format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
            })?;
            let key = key.trim();
            let idx = FIELDS
                .iter()
                .position(|&f| f == key)
                .ok_or_else(|| GenomeError::Parse {
                    field: "genome",
                    message: format!("unknown key `{key}`"),
                })?;
            if values[idx].is_some() {
                return Err(GenomeError::Parse {
                    field: FIELDS[idx],
                    message: "duplicate key".to_string(),
                });
            }
            values[idx] = Some(value.trim());
        }
        let get = |i: usize| values[i].ok_or(GenomeError::MissingField(FIELDS[i]));

        fn num(field: &'static str, s: &str) -> Result<u8, GenomeError> {
            s.parse::<u8>().map_err(|_| GenomeError::Parse {
                field,
                message: format!("`{s}` is not an integer in 0..=255"),
            })
        }

        let kernel_set = {
            let s = get(1)?;
            let kernels: Result<Vec<u8>, _> = s
                .split(',')
                .map(|p| {
                    p.trim().parse::<u8>().map_err(|_| GenomeError::Parse {
                        field: "g2",
                        message: format!("`{p}` is not a kernel size"),
                    })
                })
                .collect();
            KernelSet::from_kernels(&kernels?)?
        };

        let genome = Genome {
            half_layers: num("g1", get(0)?)?,
            kernel_set,
            pool_request: num("g3", get(2)?)?,
            avg_pool_pct: num("g4", get(3)?)?,
            concat_pct: num("g5", get(4)?)?,
            residual_pct: num("g6", get(5)?)?,
            elim_mask: KernelSet::from_bitstring(get(6)?)?,
            elim_layer_pct: num("g8", get(7)?)?,
            sep_mask: KernelSet::from_bitstring(get(8)?)?,
            sep_layer_pct: num("g10", get(9)?)?,
            optimizer: OptimizerKind::parse(get(10)?)?,
            first_channels: num("g12", get(11)?)?,
        };
        let violations = genome.validate();
        if !violations.is_empty() {
            return Err(GenomeError::Invalid(violations));
        }
        Ok(genome)
    }
}

/// Sample a genome with every gene uniform over its domain. Gene 2 is
/// uniform over the 15 nonempty kernel subsets; gene 3 over 0..=6.
pub fn random_genome<R: Rng>(rng: &mut R) -> Genome {
    Genome {
        half_layers: rng.gen_range(1..=MAX_HALF_LAYERS),
        kernel_set: KernelSet::from_bits(rng.gen_range(1..=15u8)),
        pool_request: rng.gen_range(0..=MAX_POOL_REQUEST),
        avg_pool_pct: rng.gen_range(0..=100),
        concat_pct: rng.gen_range(0..=100),
        residual_pct: rng.gen_range(0..=100),
        elim_mask: KernelSet::from_bits(rng.gen_range(0..=15u8)),
        elim_layer_pct: rng.gen_range(0..=100),
        sep_mask: KernelSet::from_bits(rng.gen_range(0..=15u8)),
        sep_layer_pct: rng.gen_range(0..=100),
        optimizer: OptimizerKind::ALL[rng.gen_range(0..4)],
        first_channels: rng.gen_range(1..=MAX_FIRST_CHANNELS),
    }
}

/// Single-point crossover. `point` is in 1..=11: child one takes genes
/// 1..=point from `a` and the rest from `b`; child two is symmetric.
pub fn crossover(a: &Genome, b: &Genome, point: usize) -> (Genome, Genome) {
    assert!(
        (1..GENE_COUNT).contains(&point),
        "crossover point {point} out of 1..=11"
    );
    let pick = |idx: usize, first: &Genome, second: &Genome| -> Genome {
        // idx is the 1-based gene position; build per-gene.
        let src = |gene: usize| if gene <= idx { first } else { second };
        Genome {
            half_layers: src(1).half_layers,
            kernel_set: src(2).kernel_set,
            pool_request: src(3).pool_request,
            avg_pool_pct: src(4).avg_pool_pct,
            concat_pct: src(5).concat_pct,
            residual_pct: src(6).residual_pct,
            elim_mask: src(7).elim_mask,
            elim_layer_pct: src(8).elim_layer_pct,
            sep_mask: src(9).sep_mask,
            sep_layer_pct: src(10).sep_layer_pct,
            optimizer: src(11).optimizer,
            first_channels: src(12).first_channels,
        }
    };
    (pick(point, a, b), pick(point, b, a))
}

/// Resample exactly one uniformly chosen gene from its domain. The resample
/// may reproduce the old value, so the output differs in at most one gene.
pub fn mutate<R: Rng>(genome: &Genome, rng: &mut R) -> Genome {
    mutate_indexed(genome, rng).0
}

pub(crate) fn mutate_indexed<R: Rng>(genome: &Genome, rng: &mut R) -> (Genome, usize) {
    let gene = rng.gen_range(1..=GENE_COUNT);
    let mut out = genome.clone();
    match gene {
        1 => out.half_layers = rng.gen_range(1..=MAX_HALF_LAYERS),
        2 => out.kernel_set = KernelSet::from_bits(rng.gen_range(1..=15u8)),
        3 => out.pool_request = rng.gen_range(0..=MAX_POOL_REQUEST),
        4 => out.avg_pool_pct = rng.gen_range(0..=100),
        5 => out.concat_pct = rng.gen_range(0..=100),
        6 => out.residual_pct = rng.gen_range(0..=100),
        7 => out.elim_mask = KernelSet::from_bits(rng.gen_range(0..=15u8)),
        8 => out.elim_layer_pct = rng.gen_range(0..=100),
        9 => out.sep_mask = KernelSet::from_bits(rng.gen_range(0..=15u8)),
        10 => out.sep_layer_pct = rng.gen_range(0..=100),
        11 => out.optimizer = OptimizerKind::ALL[rng.gen_range(0..4)],
        12 => out.first_channels = rng.gen_range(1..=MAX_FIRST_CHANNELS),
        _ => unreachable!(),
    }
    (out, gene)
}
