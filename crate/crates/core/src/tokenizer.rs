//! Token sequences for layouts (encoder input) and derivation trees (decoder output).
//!
//! A layout becomes five tokens per rectangle `(label, x, y, w, h)` with the
//! coordinates quantized to `round(v * R)`. A tree becomes its breadth-first
//! node sequence, one group `[production, args.., SEP]` per node, framed by
//! BOS and EOS. Every token carries a global index and a local index within
//! its group.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{DerivationTree, Grammar, Node, ProductionId, Symbol};
use crate::layout::{Rect, RectLayout, TerminalLabel};

pub const MAX_INPUT_LEN: usize = 512;
pub const MAX_OUTPUT_LEN: usize = 768;
pub const DEFAULT_RESOLUTION: u32 = 100;
pub const SUPPORTED_RESOLUTIONS: [u32; 5] = [50, 100, 200, 500, 1000];

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
const LABEL_BASE: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Sep,
    Label(TerminalLabel),
    Coord(u32),
    Production(ProductionId),
    Arg(u32),
}

/// Disjoint token ranges for one grammar and coordinate resolution.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    grammar: Arc<Grammar>,
    resolution: u32,
    coord_base: u32,
    prod_base: u32,
    arg_base: u32,
    size: u32,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.resolution == other.resolution && self.grammar.hash() == other.grammar.hash()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TokenizeError {
    #[error("layout has {rects} rectangles; at most {max} fit the input length")]
    TooManyRects { rects: usize, max: usize },
    #[error("unsupported resolution {0}")]
    UnsupportedResolution(u32),
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, TokenizeError> {
    Err(TokenizeError::MalformedSequence(msg.into()))
}

impl Vocabulary {
    pub fn new(grammar: Arc<Grammar>, resolution: u32) -> Result<Self, TokenizeError> {
        if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
            return Err(TokenizeError::UnsupportedResolution(resolution));
        }
        let coord_base = LABEL_BASE + TerminalLabel::COUNT as u32;
        let prod_base = coord_base + resolution + 1;
        let arg_base = prod_base + grammar.len() as u32;
        let size = arg_base + grammar.max_arg_value() + 1;
        Ok(Self { grammar, resolution, coord_base, prod_base, arg_base, size })
    }

    pub fn standard(resolution: u32) -> Result<Self, TokenizeError> {
        Self::new(Grammar::standard(), resolution)
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn label_token(&self, l: TerminalLabel) -> u32 {
        LABEL_BASE + l.index() as u32
    }

    pub fn coord_token(&self, bin: u32) -> u32 {
        debug_assert!(bin <= self.resolution);
        self.coord_base + bin
    }

    pub fn prod_token(&self, p: ProductionId) -> u32 {
        self.prod_base + p.0 as u32
    }

    pub fn arg_token(&self, v: u32) -> u32 {
        self.arg_base + v
    }

    pub fn prod_tokens(&self) -> std::ops::Range<u32> {
        self.prod_base..self.arg_base
    }

    pub fn kind(&self, token: u32) -> Option<TokenKind> {
        Some(match token {
            PAD => TokenKind::Pad,
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            SEP => TokenKind::Sep,
            t if t < self.coord_base => TokenKind::Label(TerminalLabel::from_index((t - LABEL_BASE) as usize)?),
            t if t < self.prod_base => TokenKind::Coord(t - self.coord_base),
            t if t < self.arg_base => TokenKind::Production(ProductionId((t - self.prod_base) as u16)),
            t if t < self.size => TokenKind::Arg(t - self.arg_base),
            _ => return None,
        })
    }

    pub fn token_string(&self, token: u32) -> String {
        match self.kind(token) {
            Some(TokenKind::Pad) => "<pad>".into(),
            Some(TokenKind::Bos) => "<bos>".into(),
            Some(TokenKind::Eos) => "<eos>".into(),
            Some(TokenKind::Sep) => "<sep>".into(),
            Some(TokenKind::Label(l)) => l.name().into(),
            Some(TokenKind::Coord(b)) => format!("c{b}"),
            Some(TokenKind::Production(p)) => p.name(),
            Some(TokenKind::Arg(v)) => format!("a{v}"),
            None => format!("<unk{token}>"),
        }
    }

    pub fn token_from_string(&self, s: &str) -> Option<u32> {
        (0..self.size).find(|&t| self.token_string(t) == s)
    }

    /// Token string to id map, embedded in checkpoints.
    pub fn to_json(&self) -> VocabularyDump {
        VocabularyDump {
            resolution: self.resolution,
            grammar_hash: self.grammar.hash(),
            tokens: (0..self.size).map(|t| self.token_string(t)).collect(),
        }
    }

    pub fn quantize(&self, v: f64) -> u32 {
        (v * self.resolution as f64).round().clamp(0.0, self.resolution as f64) as u32
    }
}

/// Serialized vocabulary: `tokens[id]` is the token string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyDump {
    pub resolution: u32,
    pub grammar_hash: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub global_pos: Vec<u32>,
    pub local_pos: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: u32, local: u32) {
        self.global_pos.push(self.tokens.len() as u32);
        self.tokens.push(token);
        self.local_pos.push(local);
    }

    /// The first `n` tokens.
    pub fn prefix(&self, n: usize) -> TokenSeq {
        TokenSeq {
            tokens: self.tokens[..n].to_vec(),
            global_pos: self.global_pos[..n].to_vec(),
            local_pos: self.local_pos[..n].to_vec(),
        }
    }
}

/// Encodes rectangles sorted by (y, x, label, w, h); no BOS/EOS.
pub fn encode_layout(layout: &RectLayout, vocab: &Vocabulary) -> Result<TokenSeq, TokenizeError> {
    let max = MAX_INPUT_LEN / 5;
    if layout.len() > max {
        return Err(TokenizeError::TooManyRects { rects: layout.len(), max });
    }
    let mut seq = TokenSeq::default();
    for r in layout.canonical().rects {
        seq.push(vocab.label_token(r.label), 0);
        for (i, v) in [r.x, r.y, r.w, r.h].into_iter().enumerate() {
            seq.push(vocab.coord_token(vocab.quantize(v)), i as u32 + 1);
        }
    }
    Ok(seq)
}

pub fn decode_layout(seq: &TokenSeq, vocab: &Vocabulary) -> Result<RectLayout, TokenizeError> {
    if seq.len() % 5 != 0 {
        return malformed(format!("length {} is not a multiple of 5", seq.len()));
    }
    let res = vocab.resolution as f64;
    let mut rects = Vec::with_capacity(seq.len() / 5);
    for (i, group) in seq.tokens.chunks(5).enumerate() {
        let Some(TokenKind::Label(label)) = vocab.kind(group[0]) else {
            return malformed(format!("rectangle {i} does not start with a label token"));
        };
        let mut coords = [0.0; 4];
        for (c, &tok) in coords.iter_mut().zip(&group[1..]) {
            match vocab.kind(tok) {
                Some(TokenKind::Coord(b)) => *c = b as f64 / res,
                _ => return malformed(format!("rectangle {i} has a non-coordinate token {tok}")),
            }
        }
        rects.push(Rect::new(label, coords[0], coords[1], coords[2], coords[3]));
    }
    Ok(RectLayout::new(rects))
}

/// Breadth-first encoding of the structure of a tree (sizing is ignored).
pub fn encode_tree(tree: &DerivationTree, vocab: &Vocabulary) -> Result<TokenSeq, TokenizeError> {
    let report = vocab.grammar.validate_structure(tree);
    if !report.is_empty() {
        return Err(TokenizeError::InvalidTree(report.to_string()));
    }
    let mut seq = TokenSeq::default();
    seq.push(BOS, 0);
    for node in tree.bfs() {
        seq.push(vocab.prod_token(node.prod), 0);
        for (i, &a) in node.structural.iter().enumerate() {
            seq.push(vocab.arg_token(a), i as u32 + 1);
        }
        seq.push(SEP, node.structural.len() as u32 + 1);
    }
    seq.push(EOS, 0);
    Ok(seq)
}

/// Builds a decoder sequence from raw tokens, assigning group-local indices.
pub fn output_seq_from_tokens(tokens: &[u32]) -> TokenSeq {
    let mut seq = TokenSeq::default();
    let mut local = 0;
    for &t in tokens {
        match t {
            BOS | EOS => {
                seq.push(t, 0);
                local = 0;
            }
            SEP => {
                seq.push(t, local);
                local = 0;
            }
            _ => {
                seq.push(t, local);
                local += 1;
            }
        }
    }
    seq
}

/// Rebuilds the tree from its breadth-first encoding. The result carries no sizing.
pub fn decode_tree(seq: &TokenSeq, vocab: &Vocabulary) -> Result<DerivationTree, TokenizeError> {
    let g = &vocab.grammar;
    let mut toks = seq.tokens.iter().copied();
    if toks.next() != Some(BOS) {
        return malformed("sequence must start with BOS");
    }
    // Arena of nodes and their children ids; slots are (parent, symbol).
    let mut nodes: Vec<(Node, Vec<usize>)> = Vec::new();
    let mut slots: VecDeque<(Option<usize>, Symbol)> = VecDeque::from([(None, g.axiom)]);
    loop {
        let Some(tok) = toks.next() else {
            return malformed("early end: sequence stops before EOS");
        };
        if tok == EOS {
            if let Some((_, sym)) = slots.front() {
                return malformed(format!("dangling non-terminal: {sym} has no production group"));
            }
            break;
        }
        let Some((parent, symbol)) = slots.pop_front() else {
            return malformed("tokens after the last production group; expected EOS");
        };
        let Some(TokenKind::Production(pid)) = vocab.kind(tok) else {
            return malformed(format!("expected a production for {symbol}, got `{}`", vocab.token_string(tok)));
        };
        let spec = g.get(pid).expect("production token in range");
        if spec.lhs != symbol {
            return malformed(format!("{pid} cannot rewrite {symbol}"));
        }
        let mut args = Vec::new();
        while let Some(domain) = spec.next_arg_domain(&args) {
            match toks.next().map(|t| vocab.kind(t)) {
                Some(Some(TokenKind::Arg(v))) if domain.contains(v) => args.push(v),
                Some(_) => return malformed(format!("argument {} of {pid} is out of its domain", args.len() + 1)),
                None => return malformed("early end: sequence stops inside a group"),
            }
        }
        match toks.next() {
            Some(SEP) => {}
            Some(t) => return malformed(format!("expected SEP after {pid}, got `{}`", vocab.token_string(t))),
            None => return malformed("early end: sequence stops inside a group"),
        }
        let children = spec.child_symbols(&args).map_err(TokenizeError::MalformedSequence)?;
        let id = nodes.len();
        nodes.push((Node::new(pid, args, Vec::new(), Vec::new()), Vec::new()));
        if let Some(p) = parent {
            nodes[p].1.push(id);
        }
        slots.extend(children.into_iter().map(|s| (Some(id), s)));
    }
    if toks.next().is_some() {
        return malformed("tokens after EOS");
    }
    fn assemble(id: usize, nodes: &mut Vec<(Node, Vec<usize>)>) -> Node {
        let kids = std::mem::take(&mut nodes[id].1);
        let children = kids.into_iter().map(|c| assemble(c, nodes)).collect();
        let mut node = std::mem::replace(&mut nodes[id].0, Node::leaf(ProductionId(0)));
        node.children = children;
        node
    }
    Ok(DerivationTree::new(assemble(0, &mut nodes)))
}
