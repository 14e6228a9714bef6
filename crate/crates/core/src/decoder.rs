//! Grammar-constrained decoding.
//!
//! [`Automaton`] tracks a partial breadth-first tree encoding and knows which
//! tokens may follow it: the production tokens whose left-hand side is the next
//! symbol in the frontier, the arguments inside that production's domains, the
//! closing SEP, and finally EOS. A token is only offered if some valid tree can
//! still be completed within the output length budget; the minimum completion
//! length of every symbol is precomputed from the grammar.
//!
//! Inference applies the mask to the model distribution at every step
//! (invalid probabilities set to zero, the rest renormalized), so every decoded
//! procedure parses and executes.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{DerivationTree, Grammar, GrammarError, ProductionBody, ProductionId, ProductionSpec, Symbol};
use crate::layout::RectLayout;
use crate::tokenizer::{
    decode_tree, encode_layout, output_seq_from_tokens, TokenKind, TokenSeq, TokenizeError, Vocabulary, BOS, EOS,
    MAX_OUTPUT_LEN, SEP,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DecodeError {
    #[error("token `{token}` is not allowed at position {position}")]
    IllegalTransition { token: String, position: usize },
    #[error("no token is allowed")]
    EmptyMask,
    #[error("no valid completion fits the length budget")]
    LengthBudgetExhausted,
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("model failure: {0}")]
    Model(String),
}

/// Set of allowed next tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    allowed: Vec<bool>,
}

impl TokenMask {
    pub fn all(size: usize) -> Self {
        Self { allowed: vec![true; size] }
    }

    pub fn from_allowed(size: usize, tokens: impl IntoIterator<Item = u32>) -> Self {
        let mut allowed = vec![false; size];
        for t in tokens {
            allowed[t as usize] = true;
        }
        Self { allowed }
    }

    pub fn contains(&self, token: u32) -> bool {
        self.allowed.get(token as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.allowed.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i as u32)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    /// Next token is a production for the front of the frontier.
    Production,
    /// Inside a group: arguments so far; next is an argument or SEP.
    Group { prod: ProductionId, args: Vec<u32> },
    Eos,
    Done,
}

/// Value describing a partial output sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    frontier: VecDeque<Symbol>,
    /// Sum of minimal completion lengths over `frontier`.
    frontier_min: usize,
    phase: Phase,
    /// Tokens emitted so far, BOS included.
    emitted: usize,
}

impl DecodeState {
    pub fn is_terminal(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    /// Local index the next token will carry.
    pub fn next_local(&self) -> u32 {
        match &self.phase {
            Phase::Group { args, .. } => args.len() as u32 + 1,
            _ => 0,
        }
    }

    /// Symbols still waiting for a production group.
    pub fn frontier(&self) -> impl Iterator<Item = &Symbol> {
        self.frontier.iter()
    }
}

/// Grammar tables driving [`DecodeState`] transitions.
#[derive(Debug, Clone)]
pub struct Automaton {
    vocab: Vocabulary,
    min_tokens: HashMap<Symbol, usize>,
    max_len: usize,
}

const UNREACHABLE: usize = usize::MAX / 4;

fn min_symbol_tokens(grammar: &Grammar) -> HashMap<Symbol, usize> {
    let mut table: HashMap<Symbol, usize> = grammar.symbols().into_iter().map(|s| (s, UNREACHABLE)).collect();
    // Relax until stable; terminates because every pass can only lower values.
    loop {
        let mut changed = false;
        for p in &grammar.productions {
            let cost = 1 + group_completion_with(&table, p, &[]);
            let slot = table.get_mut(&p.lhs).expect("lhs is a symbol");
            if cost < *slot {
                *slot = cost;
                changed = true;
            }
        }
        if !changed {
            return table;
        }
    }
}

/// Minimal tokens to finish a group whose production token has been emitted
/// with `args` so far: remaining arguments, SEP, and the children's subtrees.
fn group_completion_with(table: &HashMap<Symbol, usize>, spec: &ProductionSpec, args: &[u32]) -> usize {
    let m = |s: &Symbol| table.get(s).copied().unwrap_or(UNREACHABLE);
    let cost = match &spec.body {
        ProductionBody::Assign { .. } => 1,
        ProductionBody::Split { children, .. } => 1 + children.iter().map(m).sum::<usize>(),
        ProductionBody::Repeat { child, min, .. } => match args.first() {
            None => 2 + *min as usize * m(child),
            Some(&c) => 1 + c as usize * m(child),
        },
        ProductionBody::KindSplit { min, kinds, .. } => {
            let cheapest = kinds.iter().map(|k| m(&k.symbol)).min().unwrap_or(UNREACHABLE);
            match args.first() {
                None => 1 + *min as usize + 1 + *min as usize * cheapest,
                Some(&c) => {
                    let chosen: usize = args[1..]
                        .iter()
                        .map(|&k| kinds.get(k as usize).map(|k| m(&k.symbol)).unwrap_or(UNREACHABLE))
                        .sum();
                    let open = c as usize - (args.len() - 1);
                    open + 1 + chosen + open * cheapest
                }
            }
        }
    };
    cost.min(UNREACHABLE)
}

impl Automaton {
    pub fn new(vocab: Vocabulary) -> Self {
        Self::with_max_len(vocab, MAX_OUTPUT_LEN)
    }

    pub fn with_max_len(vocab: Vocabulary, max_len: usize) -> Self {
        let min_tokens = min_symbol_tokens(vocab.grammar());
        Self { vocab, min_tokens, max_len }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Minimal number of tokens (groups of the whole subtree) to derive `symbol`.
    pub fn min_tokens(&self, symbol: Symbol) -> usize {
        self.min_tokens.get(&symbol).copied().unwrap_or(UNREACHABLE)
    }

    fn spec(&self, p: ProductionId) -> &ProductionSpec {
        self.vocab.grammar().get(p).expect("production ids come from the vocabulary")
    }

    fn group_completion(&self, spec: &ProductionSpec, args: &[u32]) -> usize {
        group_completion_with(&self.min_tokens, spec, args)
    }

    /// State right after BOS.
    pub fn initial(&self) -> DecodeState {
        let axiom = self.vocab.grammar().axiom;
        DecodeState {
            frontier: VecDeque::from([axiom]),
            frontier_min: self.min_tokens(axiom),
            phase: Phase::Production,
            emitted: 1,
        }
    }

    /// Replays `tokens`, which must start with BOS.
    pub fn from_prefix(&self, tokens: &[u32]) -> Result<DecodeState, DecodeError> {
        match tokens.first() {
            Some(&BOS) => {}
            Some(&t) => {
                return Err(DecodeError::IllegalTransition { token: self.vocab.token_string(t), position: 0 })
            }
            None => return Ok(self.initial()),
        }
        let mut state = self.initial();
        for &t in &tokens[1..] {
            state = self.advance(&state, t)?;
        }
        Ok(state)
    }

    /// Minimal tokens needed after `token` is appended to `state`, EOS
    /// included, or `None` when the token is syntactically illegal.
    fn completion_after(&self, state: &DecodeState, token: u32) -> Option<usize> {
        match (&state.phase, self.vocab.kind(token)?) {
            (Phase::Production, TokenKind::Production(p)) => {
                let front = *state.frontier.front()?;
                let spec = self.spec(p);
                (spec.lhs == front)
                    .then(|| state.frontier_min - self.min_tokens(front) + self.group_completion(spec, &[]) + 1)
            }
            (Phase::Group { prod, args }, TokenKind::Arg(v)) => {
                let spec = self.spec(*prod);
                let domain = spec.next_arg_domain(args)?;
                if !domain.contains(v) {
                    return None;
                }
                let mut next = args.clone();
                next.push(v);
                Some(state.frontier_min + self.group_completion(spec, &next) + 1)
            }
            (Phase::Group { prod, args }, TokenKind::Sep) => {
                let spec = self.spec(*prod);
                if spec.next_arg_domain(args).is_some() {
                    return None;
                }
                Some(state.frontier_min + self.group_completion(spec, args) - 1 + 1)
            }
            (Phase::Eos, TokenKind::Eos) => Some(0),
            _ => None,
        }
    }

    pub fn is_valid(&self, state: &DecodeState, token: u32) -> bool {
        self.completion_after(state, token)
            .is_some_and(|rest| state.emitted + 1 + rest <= self.max_len)
    }

    /// Tokens that keep the prefix completable within the length budget.
    pub fn valid_next_tokens(&self, state: &DecodeState) -> TokenMask {
        let size = self.vocab.size();
        let candidates: Box<dyn Iterator<Item = u32>> = match &state.phase {
            Phase::Production => Box::new(self.vocab.prod_tokens()),
            Phase::Group { .. } => {
                Box::new(std::iter::once(SEP).chain((0..size as u32).filter(|&t| matches!(self.vocab.kind(t), Some(TokenKind::Arg(_))))))
            }
            Phase::Eos => Box::new(std::iter::once(EOS)),
            Phase::Done => Box::new(std::iter::empty()),
        };
        TokenMask::from_allowed(size, candidates.filter(|&t| self.is_valid(state, t)))
    }

    /// Transition on `token`; fails if the token is outside the mask.
    pub fn advance(&self, state: &DecodeState, token: u32) -> Result<DecodeState, DecodeError> {
        if !self.is_valid(state, token) {
            return Err(DecodeError::IllegalTransition {
                token: self.vocab.token_string(token),
                position: state.emitted,
            });
        }
        let mut next = state.clone();
        next.emitted += 1;
        match (&state.phase, self.vocab.kind(token)) {
            (Phase::Production, Some(TokenKind::Production(p))) => {
                let front = next.frontier.pop_front().expect("validated");
                next.frontier_min -= self.min_tokens(front);
                next.phase = Phase::Group { prod: p, args: Vec::new() };
            }
            (Phase::Group { prod, args }, Some(TokenKind::Arg(v))) => {
                let mut args = args.clone();
                args.push(v);
                next.phase = Phase::Group { prod: *prod, args };
            }
            (Phase::Group { prod, args }, Some(TokenKind::Sep)) => {
                let children = self.spec(*prod).child_symbols(args).expect("validated arguments");
                for c in children {
                    next.frontier_min += self.min_tokens(c);
                    next.frontier.push_back(c);
                }
                next.phase = if next.frontier.is_empty() { Phase::Eos } else { Phase::Production };
            }
            (Phase::Eos, Some(TokenKind::Eos)) => next.phase = Phase::Done,
            _ => unreachable!("validated transition"),
        }
        Ok(next)
    }
}

/// Zeroes probabilities outside `mask` and renormalizes the rest. If every
/// allowed entry is below 1e-12 the result is uniform over the allowed tokens.
pub fn nullify_and_renormalize(probs: &[f64], mask: &TokenMask) -> Result<Vec<f64>, DecodeError> {
    let allowed = mask.count();
    if allowed == 0 {
        return Err(DecodeError::EmptyMask);
    }
    let max_valid = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.contains(*i as u32))
        .map(|(_, &p)| p)
        .fold(0.0, f64::max);
    if max_valid < 1e-12 {
        let u = 1.0 / allowed as f64;
        return Ok((0..probs.len()).map(|i| if mask.contains(i as u32) { u } else { 0.0 }).collect());
    }
    let total: f64 = probs.iter().enumerate().filter(|(i, _)| mask.contains(*i as u32)).map(|(_, p)| p).sum();
    Ok(probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if mask.contains(i as u32) { p / total } else { 0.0 })
        .collect())
}

/// Softmax in f64 with max subtraction.
pub fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| ((l as f64 - max) / t).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A sequence model that can be queried one output token at a time.
pub trait StepModel {
    type Session;

    /// Encodes the input and prepares an empty output prefix.
    fn begin(&self, input: &TokenSeq) -> Result<Self::Session, DecodeError>;

    /// Appends `token` (at group-local index `local`) and returns the logits
    /// for the token after it.
    fn step(&self, session: &mut Self::Session, token: u32, local: u32) -> Result<Vec<f32>, DecodeError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// `None` decodes greedily; otherwise samples at this temperature.
    pub temperature: Option<f64>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    /// Tree with default sizing.
    pub tree: DerivationTree,
    pub tokens: TokenSeq,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Masked autoregressive inference of a procedure for `layout`.
pub fn infer_procedure<M: StepModel>(
    model: &M,
    automaton: &Automaton,
    layout: &RectLayout,
    cfg: &DecodeConfig,
) -> Result<Inference, DecodeError> {
    infer_with_prefix(model, automaton, layout, &[BOS], cfg)
}

/// Resumes decoding after a (possibly user-corrected) prefix starting with BOS.
pub fn infer_with_prefix<M: StepModel>(
    model: &M,
    automaton: &Automaton,
    layout: &RectLayout,
    prefix: &[u32],
    cfg: &DecodeConfig,
) -> Result<Inference, DecodeError> {
    let vocab = automaton.vocab();
    let input = encode_layout(layout, vocab)?;
    let mut state = automaton.from_prefix(prefix)?;
    let mut tokens: Vec<u32> = if prefix.is_empty() { vec![BOS] } else { prefix.to_vec() };
    let mut session = model.begin(&input)?;
    let locals = output_seq_from_tokens(&tokens).local_pos;
    let mut logits = Vec::new();
    for (&t, &l) in tokens.iter().zip(&locals) {
        logits = model.step(&mut session, t, l)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    while !state.is_terminal() {
        let mask = automaton.valid_next_tokens(&state);
        if mask.is_empty() {
            return Err(DecodeError::LengthBudgetExhausted);
        }
        let probs = softmax(&logits, cfg.temperature.unwrap_or(1.0));
        let probs = nullify_and_renormalize(&probs, &mask)?;
        let token = match cfg.temperature {
            Some(t) if t > 0.0 => {
                let mut dart: f64 = rng.random_range(0.0..1.0);
                let mut pick = mask.tokens().last().expect("non-empty mask") as usize;
                for (i, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        if dart < p {
                            pick = i;
                            break;
                        }
                        dart -= p;
                    }
                }
                pick as u32
            }
            _ => argmax(&probs) as u32,
        };
        let local = state.next_local();
        state = automaton.advance(&state, token)?;
        tokens.push(token);
        if !state.is_terminal() {
            logits = model.step(&mut session, token, local)?;
        }
    }
    let seq = output_seq_from_tokens(&tokens);
    let tree = decode_tree(&seq, vocab)?;
    let tree = automaton.vocab().grammar().default_sizing(&tree)?;
    Ok(Inference { tree, tokens: seq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::record_at;
    use crate::grammar::{prod, NonTerminal};
    use crate::tokenizer::encode_tree;

    fn automaton() -> Automaton {
        Automaton::new(Vocabulary::standard(100).unwrap())
    }

    #[test]
    fn initial_mask_is_facade_productions() {
        let a = automaton();
        let v = a.vocab();
        let mask = a.valid_next_tokens(&a.initial());
        let got: Vec<u32> = mask.tokens().collect();
        assert_eq!(got, vec![v.prod_token(prod::FACADE), v.prod_token(prod::FACADE_ATTIC)]);
    }

    #[test]
    fn repeat_y_count_domain() {
        let a = automaton();
        let v = a.vocab();
        let tree = record_at(1, 0).tree;
        let seq = encode_tree(&tree, v).unwrap();
        let pos = seq.tokens.iter().position(|&t| t == v.prod_token(prod::UPPER_FLOORS)).unwrap();
        let state = a.from_prefix(&seq.tokens[..=pos]).unwrap();
        let got: Vec<u32> = a.valid_next_tokens(&state).tokens().collect();
        let want: Vec<u32> = (1..=6).map(|c| v.arg_token(c)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn completion_offers_only_eos() {
        let a = automaton();
        let seq = encode_tree(&record_at(2, 0).tree, a.vocab()).unwrap();
        let n = seq.len();
        let state = a.from_prefix(&seq.tokens[..n - 1]).unwrap();
        assert_eq!(a.valid_next_tokens(&state).tokens().collect::<Vec<_>>(), vec![EOS]);
        let done = a.advance(&state, EOS).unwrap();
        assert!(done.is_terminal());
        assert!(a.valid_next_tokens(&done).is_empty());
    }

    #[test]
    fn illegal_transition() {
        let a = automaton();
        let err = a.advance(&a.initial(), a.vocab().prod_token(prod::WALL)).unwrap_err();
        assert!(matches!(err, DecodeError::IllegalTransition { position: 1, .. }));
        assert!(a.advance(&a.initial(), SEP).is_err());
    }

    #[test]
    fn replay_is_deterministic_and_terminal() {
        let a = automaton();
        for i in 0..100 {
            let seq = encode_tree(&record_at(3, i).tree, a.vocab()).unwrap();
            let s1 = a.from_prefix(&seq.tokens).unwrap();
            let s2 = a.from_prefix(&seq.tokens).unwrap();
            assert!(s1.is_terminal());
            assert_eq!(s1, s2);
            // local indices agree with the tokenizer
            let mut st = a.initial();
            for (k, &t) in seq.tokens.iter().enumerate().skip(1) {
                assert_eq!(st.next_local(), seq.local_pos[k]);
                st = a.advance(&st, t).unwrap();
            }
        }
    }

    #[test]
    fn min_tokens_table() {
        let a = automaton();
        // Terminal: [assign, SEP].
        assert_eq!(a.min_tokens(Symbol::Terminal(crate::layout::TerminalLabel::Wall)), 2);
        // Tile: blank assign.
        assert_eq!(a.min_tokens(Symbol::NonTerminal(NonTerminal::Tile)), 2);
        // Cell: [P, SEP] + three assigns.
        assert_eq!(a.min_tokens(Symbol::NonTerminal(NonTerminal::Cell)), 8);
        // Floor: RepeatX with one blank tile = [P, a1, SEP] + 2.
        assert_eq!(a.min_tokens(Symbol::NonTerminal(NonTerminal::Floor)), 5);
    }

    #[test]
    fn length_budget_prunes_expensive_choices() {
        let v = Vocabulary::standard(100).unwrap();
        let full = Automaton::new(v.clone());
        let root_min = full.min_tokens(Symbol::AXIOM);
        // Budget exactly fits the cheapest tree (BOS + subtree + EOS).
        let tight = Automaton::with_max_len(v.clone(), root_min + 2);
        let mask = tight.valid_next_tokens(&tight.initial());
        assert_eq!(mask.tokens().collect::<Vec<_>>(), vec![v.prod_token(prod::FACADE)]);
        let tiny = Automaton::with_max_len(v, root_min + 1);
        assert!(tiny.valid_next_tokens(&tiny.initial()).is_empty());
    }

    #[test]
    fn nullify_examples() {
        let mask = TokenMask::from_allowed(3, [0, 2]);
        let out = nullify_and_renormalize(&[0.5, 0.3, 0.2], &mask).unwrap();
        assert!((out[0] - 0.714286).abs() < 1e-6 && out[1] == 0.0 && (out[2] - 0.285714).abs() < 1e-6);
        let all = TokenMask::all(3);
        assert_eq!(nullify_and_renormalize(&[0.5, 0.3, 0.2], &all).unwrap(), vec![0.5, 0.3, 0.2]);
        let mask = TokenMask::from_allowed(3, [1, 2]);
        assert_eq!(nullify_and_renormalize(&[1.0, 0.0, 0.0], &mask).unwrap(), vec![0.0, 0.5, 0.5]);
        assert_eq!(nullify_and_renormalize(&[1.0, 0.0], &TokenMask::from_allowed(2, [])), Err(DecodeError::EmptyMask));
    }

    /// Replays a fixed token script, putting all mass on the scripted token.
    struct Scripted {
        script: Vec<u32>,
        vocab: usize,
    }

    impl StepModel for Scripted {
        type Session = usize;

        fn begin(&self, _input: &TokenSeq) -> Result<usize, DecodeError> {
            Ok(0)
        }

        fn step(&self, pos: &mut usize, token: u32, _local: u32) -> Result<Vec<f32>, DecodeError> {
            assert_eq!(self.script[*pos], token);
            *pos += 1;
            let mut logits = vec![0.0; self.vocab];
            if let Some(&next) = self.script.get(*pos) {
                logits[next as usize] = 50.0;
            }
            Ok(logits)
        }
    }

    #[test]
    fn scripted_model_reproduces_tree() {
        let a = automaton();
        let rec = record_at(6, 4);
        let seq = encode_tree(&rec.tree, a.vocab()).unwrap();
        let model = Scripted { script: seq.tokens.clone(), vocab: a.vocab().size() };
        let out = infer_procedure(&model, &a, &rec.layout, &DecodeConfig::default()).unwrap();
        assert!(out.tree.same_structure(&rec.tree));
        assert_eq!(out.tokens, seq);
        assert!(crate::grammar::validate_tree(&out.tree).is_empty());
    }

    /// Uniform logits: the mask alone decides what is emitted.
    struct Flat(usize);

    impl StepModel for Flat {
        type Session = ();

        fn begin(&self, _input: &TokenSeq) -> Result<(), DecodeError> {
            Ok(())
        }

        fn step(&self, _s: &mut (), _t: u32, _l: u32) -> Result<Vec<f32>, DecodeError> {
            Ok(vec![0.0; self.0])
        }
    }

    #[test]
    fn sampling_always_yields_valid_trees() {
        let a = automaton();
        let layout = record_at(7, 0).layout;
        for seed in 0..200 {
            let cfg = DecodeConfig { temperature: Some(1.0), seed };
            let out = infer_procedure(&Flat(a.vocab().size()), &a, &layout, &cfg).unwrap();
            assert!(out.tokens.len() <= MAX_OUTPUT_LEN);
            assert!(crate::grammar::execute(&out.tree).unwrap().is_tiling());
        }
    }

    #[test]
    fn resume_from_corrected_prefix() {
        let a = automaton();
        let v = a.vocab();
        let rec = record_at(6, 9);
        let seq = encode_tree(&rec.tree, v).unwrap();
        let model = Scripted { script: seq.tokens.clone(), vocab: v.size() };
        let out = infer_with_prefix(&model, &a, &rec.layout, &seq.tokens[..7], &DecodeConfig::default()).unwrap();
        assert_eq!(out.tokens.tokens, seq.tokens);
        let bad = [BOS, v.prod_token(prod::WALL)];
        assert!(matches!(
            infer_with_prefix(&model, &a, &rec.layout, &bad, &DecodeConfig::default()),
            Err(DecodeError::IllegalTransition { .. })
        ));
    }
}
