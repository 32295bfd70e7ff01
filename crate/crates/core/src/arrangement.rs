//! Kernel arrangement patterns.
//!
//! An arrangement lists, in order, how many kernels of each family make up a
//! layer's `Ci x Co` kernel mosaic:
//!
//! ```text
//! (3x64)G30Lg15Lt15Tf36P96          count form, channels required
//! G0.1562Lg0.0781Lt0.0781Tf0.1875P0.5   ratio form, channels bound later
//! ```
//!
//! Family codes are `G` (Gabor), `Lg` (LoG), `Lt` (LoT), `Tf` (TGD1st),
//! `Ts` (TGD2nd), `M` (Mean) and `P` (Plain).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::kernels::{KernelFamily, KernelSize};

/// Allowed shortfall of a ratio pattern's sum below 1.
pub const RATIO_SUM_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("empty arrangement pattern")]
    Empty,
    #[error("malformed channel prefix {0:?}, expected (CixCo)")]
    BadPrefix(String),
    #[error("block {block}: unknown kernel code {code:?}")]
    UnknownCode { block: usize, code: String },
    #[error("block {block} ({text:?}): malformed number")]
    BadNumber { block: usize, text: String },
    #[error("block {block} ({text:?}): count and ratio forms cannot be mixed")]
    MixedForms { block: usize, text: String },
    #[error("count-form pattern requires a (CixCo) prefix")]
    MissingPrefix,
    #[error("block {block} ({text:?}): count must be positive")]
    ZeroCount { block: usize, text: String },
    #[error("block {block} ({text:?}): ratio must lie in (0, 1]")]
    RatioOutOfRange { block: usize, text: String },
    #[error("block counts sum to {sum}, expected {expected} = Ci x Co")]
    CountSum { sum: usize, expected: usize },
    #[error("ratios sum to {sum}, expected a value in [{}, 1]", 1.0 - RATIO_SUM_TOLERANCE)]
    RatioSum { sum: f64 },
    #[error("block {block} ({family}): ratio binds to zero kernels at {total} kernels")]
    RoundsToZero { block: usize, family: KernelFamily, total: usize },
    #[error("pattern declares {declared_in}x{declared_out} channels, layer has {in_channels}x{out_channels}")]
    ChannelMismatch { declared_in: usize, declared_out: usize, in_channels: usize, out_channels: usize },
    #[error("expected a count-form pattern, got a ratio form")]
    NotCountForm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub family: KernelFamily,
    pub count: usize,
}

/// Count-form arrangement bound to concrete channel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arrangement {
    pub in_channels: usize,
    pub out_channels: usize,
    pub blocks: Vec<Block>,
}

impl Arrangement {
    pub fn new(in_channels: usize, out_channels: usize, blocks: Vec<Block>) -> Result<Self, PatternError> {
        if blocks.is_empty() {
            return Err(PatternError::Empty);
        }
        if let Some(pos) = blocks.iter().position(|b| b.count == 0) {
            let b = blocks[pos];
            return Err(PatternError::ZeroCount { block: pos + 1, text: format!("{}{}", b.family.code(), b.count) });
        }
        let sum: usize = blocks.iter().map(|b| b.count).sum();
        let expected = in_channels * out_channels;
        if sum != expected {
            return Err(PatternError::CountSum { sum, expected });
        }
        Ok(Arrangement { in_channels, out_channels, blocks })
    }

    /// Single-family arrangement.
    pub fn uniform(family: KernelFamily, in_channels: usize, out_channels: usize) -> Result<Self, PatternError> {
        Arrangement::new(in_channels, out_channels, vec![Block { family, count: in_channels * out_channels }])
    }

    pub fn kernel_count(&self) -> usize {
        self.in_channels * self.out_channels
    }

    /// Family of every kernel position in arrangement order.
    pub fn flattened(&self) -> Vec<KernelFamily> {
        self.blocks.iter().flat_map(|b| std::iter::repeat_n(b.family, b.count)).collect()
    }

    /// Count of learnable parameters at the given kernel size.
    pub fn learnable_params(&self, size: KernelSize) -> usize {
        self.blocks.iter().map(|b| b.family.akp_count(size) * b.count).sum()
    }

    /// Fraction of learnable parameters saved relative to a plain
    /// convolution with the same channels and kernel size.
    pub fn compact_factor(&self, size: KernelSize) -> f64 {
        let full = self.kernel_count() * size.area();
        1.0 - self.learnable_params(size) as f64 / full as f64
    }

    /// Canonical text form; parses back to an identical arrangement.
    pub fn serialize(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}x{})", self.in_channels, self.out_channels)?;
        for b in &self.blocks {
            write!(f, "{}{}", b.family.code(), b.count)?;
        }
        Ok(())
    }
}

impl FromStr for Arrangement {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match parse_pattern(s)? {
            Pattern::Counts(a) => Ok(a),
            Pattern::Ratios(_) => Err(PatternError::NotCountForm),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioBlock {
    pub family: KernelFamily,
    pub ratio: f64,
}

/// Ratio-form arrangement whose channel counts are supplied at bind time.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioArrangement {
    /// Channels from an optional `(CixCo)` prefix.
    pub channels: Option<(usize, usize)>,
    pub blocks: Vec<RatioBlock>,
}

impl RatioArrangement {
    pub fn new(blocks: Vec<RatioBlock>) -> Result<Self, PatternError> {
        if blocks.is_empty() {
            return Err(PatternError::Empty);
        }
        for (i, b) in blocks.iter().enumerate() {
            if !(b.ratio > 0.0 && b.ratio <= 1.0) {
                return Err(PatternError::RatioOutOfRange {
                    block: i + 1,
                    text: format!("{}{:?}", b.family.code(), b.ratio),
                });
            }
        }
        let sum: f64 = blocks.iter().map(|b| b.ratio).sum();
        // small slack for binary rounding of decimal ratios
        if !(1.0 - RATIO_SUM_TOLERANCE..=1.0 + 1e-9).contains(&sum) {
            return Err(PatternError::RatioSum { sum });
        }
        Ok(RatioArrangement { channels: None, blocks })
    }

    /// Converts ratios to counts for a `Ci x Co` layer.
    ///
    /// Counts are apportioned by largest remainder over the normalized
    /// ratios, so they always sum to exactly `Ci * Co`. Ties go to the
    /// earlier block.
    pub fn bind(&self, in_channels: usize, out_channels: usize) -> Result<Arrangement, PatternError> {
        if let Some((ci, co)) = self.channels {
            if (ci, co) != (in_channels, out_channels) {
                return Err(PatternError::ChannelMismatch {
                    declared_in: ci,
                    declared_out: co,
                    in_channels,
                    out_channels,
                });
            }
        }
        let total = in_channels * out_channels;
        let sum: f64 = self.blocks.iter().map(|b| b.ratio).sum();
        let quotas: Vec<f64> = self.blocks.iter().map(|b| b.ratio / sum * total as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        // stable sort keeps earlier blocks first among equal remainders
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra)
        });
        for &i in order.iter().take(total.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        let blocks = self
            .blocks
            .iter()
            .zip(counts)
            .enumerate()
            .map(|(i, (b, count))| {
                if count == 0 {
                    Err(PatternError::RoundsToZero { block: i + 1, family: b.family, total })
                } else {
                    Ok(Block { family: b.family, count })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Arrangement::new(in_channels, out_channels, blocks)
    }
}

impl fmt::Display for RatioArrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((ci, co)) = self.channels {
            write!(f, "({ci}x{co})")?;
        }
        for b in &self.blocks {
            // Debug formatting always keeps a decimal point
            write!(f, "{}{:?}", b.family.code(), b.ratio)?;
        }
        Ok(())
    }
}

/// Either form of a parsed pattern.
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    Counts(Arrangement),
    Ratios(RatioArrangement),
}

impl Pattern {
    /// Resolves the pattern against concrete layer channels.
    pub fn bind(&self, in_channels: usize, out_channels: usize) -> Result<Arrangement, PatternError> {
        match self {
            Pattern::Counts(a) => {
                if (a.in_channels, a.out_channels) != (in_channels, out_channels) {
                    return Err(PatternError::ChannelMismatch {
                        declared_in: a.in_channels,
                        declared_out: a.out_channels,
                        in_channels,
                        out_channels,
                    });
                }
                Ok(a.clone())
            }
            Pattern::Ratios(r) => r.bind(in_channels, out_channels),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Counts(a) => a.fmt(f),
            Pattern::Ratios(r) => r.fmt(f),
        }
    }
}

impl FromStr for Pattern {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_pattern(s)
    }
}

enum Amount {
    Count(usize),
    Ratio(f64),
}

/// Parses either pattern form.
pub fn parse_pattern(text: &str) -> Result<Pattern, PatternError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(PatternError::Empty);
    }
    let (channels, body) = match text.strip_prefix('(') {
        Some(rest) => {
            let close = rest.find(')').ok_or_else(|| PatternError::BadPrefix(text.to_string()))?;
            (Some(parse_channels(&rest[..close])?), &rest[close + 1..])
        }
        None => (None, text),
    };

    let mut parsed = Vec::new();
    let mut rest = body;
    while !rest.is_empty() {
        let block = parsed.len() + 1;
        let code_len = code_length(rest);
        let code = &rest[..code_len];
        let number_len =
            rest[code_len..].find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(rest.len() - code_len);
        let number = &rest[code_len..code_len + number_len];
        let token = &rest[..code_len + number_len];
        let family = KernelFamily::from_code(code).ok_or_else(|| PatternError::UnknownCode {
            block,
            code: if code.is_empty() { token.chars().take(1).collect() } else { code.to_string() },
        })?;
        if number.is_empty() {
            return Err(PatternError::BadNumber { block, text: token.to_string() });
        }
        let amount = if number.contains('.') {
            number
                .parse::<f64>()
                .map(Amount::Ratio)
                .map_err(|_| PatternError::BadNumber { block, text: token.to_string() })?
        } else {
            number
                .parse::<usize>()
                .map(Amount::Count)
                .map_err(|_| PatternError::BadNumber { block, text: token.to_string() })?
        };
        parsed.push((family, amount, token.to_string()));
        rest = &rest[code_len + number_len..];
    }
    if parsed.is_empty() {
        return Err(PatternError::Empty);
    }

    let ratio_form = matches!(parsed[0].1, Amount::Ratio(_));
    let mut counts = Vec::new();
    let mut ratios = Vec::new();
    for (i, (family, amount, token)) in parsed.into_iter().enumerate() {
        match (amount, ratio_form) {
            (Amount::Count(count), false) => {
                if count == 0 {
                    return Err(PatternError::ZeroCount { block: i + 1, text: token });
                }
                counts.push(Block { family, count });
            }
            (Amount::Ratio(ratio), true) => {
                if !(ratio > 0.0 && ratio <= 1.0) {
                    return Err(PatternError::RatioOutOfRange { block: i + 1, text: token });
                }
                ratios.push(RatioBlock { family, ratio });
            }
            _ => return Err(PatternError::MixedForms { block: i + 1, text: token }),
        }
    }

    if ratio_form {
        let mut r = RatioArrangement::new(ratios)?;
        r.channels = channels;
        Ok(Pattern::Ratios(r))
    } else {
        let (ci, co) = channels.ok_or(PatternError::MissingPrefix)?;
        Ok(Pattern::Counts(Arrangement::new(ci, co, counts)?))
    }
}

fn parse_channels(inner: &str) -> Result<(usize, usize), PatternError> {
    let bad = || PatternError::BadPrefix(format!("({inner})"));
    let (a, b) = inner.split_once(['x', 'X', '×']).ok_or_else(bad)?;
    let ci: usize = a.trim().parse().map_err(|_| bad())?;
    let co: usize = b.trim().parse().map_err(|_| bad())?;
    if ci == 0 || co == 0 {
        return Err(bad());
    }
    Ok((ci, co))
}

/// Byte length of the family code at the start of `s`: one uppercase letter
/// optionally followed by one lowercase letter.
fn code_length(s: &str) -> usize {
    let bytes = s.as_bytes();
    match bytes.first() {
        Some(c) if c.is_ascii_uppercase() => {
            if bytes.get(1).is_some_and(|c| c.is_ascii_lowercase()) {
                2
            } else {
                1
            }
        }
        _ => s.chars().next().map_or(0, |c| {
            // consume a run of letters so the error names the whole bad code
            let run = s.find(|c: char| !c.is_alphabetic()).unwrap_or(s.len());
            run.max(c.len_utf8())
        }),
    }
}
