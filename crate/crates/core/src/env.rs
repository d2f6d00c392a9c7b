//! Symbolic Points24 environment plus a brute-force solver used as the
//! oracle and the supervised-initialization label source.

use num_rational::Ratio;
use rand::Rng;
use thiserror::Error;

use crate::tokens::{self, render, Token};

/// Episode horizon.
pub const MAX_STEPS: u8 = 20;
pub const TARGET: i64 = 24;
/// 4 cards x 11-way one-hot (value slot while unused, slot 10 once used).
pub const OBS_DIM: usize = 44;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("stepping a finished episode")]
    EpisodeFinished,
    #[error("{0:?} is not an action token")]
    NotAnAction(Token),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Points24State {
    pub cards: [u8; 4],
    pub formula: Vec<Token>,
    pub used_mask: [bool; 4],
    pub step_count: u8,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub legal: bool,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_state: Points24State,
    pub done: bool,
    pub info: StepInfo,
}

impl Points24State {
    pub fn new(cards: [u8; 4]) -> Self {
        Self {
            cards,
            formula: Vec::new(),
            used_mask: [false; 4],
            step_count: 0,
            done: false,
        }
    }

    /// Observation features: per card an 11-way one-hot, slot (value-1)
    /// while the card is unused and slot 10 once consumed.
    pub fn features(&self) -> Vec<f32> {
        let mut out = vec![0.0; OBS_DIM];
        for (i, (&card, &used)) in self.cards.iter().zip(&self.used_mask).enumerate() {
            let slot = if used { 10 } else { card as usize - 1 };
            out[i * 11 + slot] = 1.0;
        }
        out
    }

    /// Grammar scan of the formula so far: (expects_operand, paren balance,
    /// poisoned). Poisoned means the prefix already violates infix alternation
    /// and can never extend to a well-formed expression; number tokens can
    /// still be appended (their legality is card availability only), but
    /// operators, parens and "=" cannot.
    fn scan(&self) -> (bool, i32, bool) {
        let mut expects_operand = true;
        let mut balance = 0i32;
        let mut poisoned = false;
        for &t in &self.formula {
            if t.is_number() {
                if !expects_operand {
                    poisoned = true;
                }
                expects_operand = false;
            } else if t.is_operator() {
                if expects_operand {
                    poisoned = true;
                }
                expects_operand = true;
            } else if t == tokens::LPAREN {
                if !expects_operand {
                    poisoned = true;
                }
                balance += 1;
            } else if t == tokens::RPAREN {
                if expects_operand || balance == 0 {
                    poisoned = true;
                }
                balance -= 1;
            }
        }
        (expects_operand, balance, poisoned)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Points24Env {
    /// When set, terminal success additionally requires all four cards used.
    pub strict_all_cards: bool,
}

impl Default for Points24Env {
    fn default() -> Self {
        Self {
            strict_all_cards: false,
        }
    }
}

impl Points24Env {
    /// Deal four i.i.d. cards with the 13-rank frequencies; face ranks map
    /// to value 10, so value 10 has probability 4/13.
    pub fn reset(&self, rng: &mut impl Rng) -> Points24State {
        let mut cards = [0u8; 4];
        for c in &mut cards {
            let rank = rng.gen_range(1..=13u8);
            *c = rank.min(10);
        }
        Points24State::new(cards)
    }

    pub fn legal(&self, state: &Points24State, action: Token) -> bool {
        if !action.is_action() {
            return false;
        }
        let (operand, balance, poisoned) = state.scan();
        match action {
            // Numbers are constrained only by card availability.
            t if t.is_number() => {
                let v = t.number_value().unwrap();
                state
                    .cards
                    .iter()
                    .zip(&state.used_mask)
                    .any(|(&c, &u)| !u && c == v)
            }
            tokens::LPAREN => !poisoned && operand,
            tokens::RPAREN => !poisoned && !operand && balance > 0,
            tokens::EQUALS => {
                !poisoned && !operand && balance == 0 && !state.formula.is_empty()
            }
            t if t.is_operator() => !poisoned && !operand,
            _ => false,
        }
    }

    pub fn step(&self, state: &Points24State, action: Token) -> Result<StepOutcome, EnvError> {
        if state.done {
            return Err(EnvError::EpisodeFinished);
        }
        if !action.is_action() {
            return Err(EnvError::NotAnAction(action));
        }
        if !self.legal(state, action) {
            return Ok(self.penalized(state));
        }

        let mut next = state.clone();
        next.step_count += 1;

        if action == tokens::EQUALS {
            let value = evaluate(&next.formula);
            let success = value == Some(Ratio::from_integer(TARGET))
                && (!self.strict_all_cards || next.used_mask.iter().all(|&u| u));
            next.done = true;
            return Ok(StepOutcome {
                reward: if success { 10.0 } else { -1.0 },
                next_state: next,
                done: true,
                info: StepInfo {
                    legal: true,
                    success,
                },
            });
        }

        if let Some(v) = action.number_value() {
            let slot = next
                .cards
                .iter()
                .zip(&next.used_mask)
                .position(|(&c, &u)| !u && c == v)
                .expect("legality guarantees an unused card");
            next.used_mask[slot] = true;
        }
        next.formula.push(action);

        let truncated = next.step_count >= MAX_STEPS;
        next.done = truncated;
        Ok(StepOutcome {
            reward: if truncated { -1.0 } else { 0.0 },
            next_state: next,
            done: truncated,
            info: StepInfo {
                legal: true,
                success: false,
            },
        })
    }

    /// Illegal-action outcome without consuming an action token; used when a
    /// generated response carries no extractable action.
    pub fn step_without_action(&self, state: &Points24State) -> Result<StepOutcome, EnvError> {
        if state.done {
            return Err(EnvError::EpisodeFinished);
        }
        Ok(self.penalized(state))
    }

    fn penalized(&self, state: &Points24State) -> StepOutcome {
        let mut next = state.clone();
        next.step_count += 1;
        let truncated = next.step_count >= MAX_STEPS;
        next.done = truncated;
        StepOutcome {
            reward: -1.0,
            next_state: next,
            done: truncated,
            info: StepInfo {
                legal: false,
                success: false,
            },
        }
    }
}

/// Exact rational evaluation of a complete infix formula; `None` on division
/// by zero. Callers must pass a grammatically complete formula.
pub fn evaluate(formula: &[Token]) -> Option<Ratio<i64>> {
    let mut pos = 0;
    let v = parse_expr(formula, &mut pos)?;
    debug_assert_eq!(pos, formula.len(), "formula {} not fully consumed", render(formula));
    Some(v)
}

fn parse_expr(f: &[Token], pos: &mut usize) -> Option<Ratio<i64>> {
    let mut acc = parse_term(f, pos)?;
    while *pos < f.len() && (f[*pos] == tokens::PLUS || f[*pos] == tokens::MINUS) {
        let op = f[*pos];
        *pos += 1;
        let rhs = parse_term(f, pos)?;
        acc = if op == tokens::PLUS { acc + rhs } else { acc - rhs };
    }
    Some(acc)
}

fn parse_term(f: &[Token], pos: &mut usize) -> Option<Ratio<i64>> {
    let mut acc = parse_factor(f, pos)?;
    while *pos < f.len() && (f[*pos] == tokens::TIMES || f[*pos] == tokens::DIVIDE) {
        let op = f[*pos];
        *pos += 1;
        let rhs = parse_factor(f, pos)?;
        if op == tokens::TIMES {
            acc *= rhs;
        } else {
            if rhs == Ratio::from_integer(0) {
                return None;
            }
            acc /= rhs;
        }
    }
    Some(acc)
}

fn parse_factor(f: &[Token], pos: &mut usize) -> Option<Ratio<i64>> {
    let t = *f.get(*pos)?;
    *pos += 1;
    if let Some(v) = t.number_value() {
        return Some(Ratio::from_integer(v as i64));
    }
    if t == tokens::LPAREN {
        let v = parse_expr(f, pos)?;
        debug_assert_eq!(f.get(*pos), Some(&tokens::RPAREN));
        *pos += 1;
        return Some(v);
    }
    unreachable!("factor starts with {t}");
}

#[derive(Debug, Clone)]
enum Expr {
    Num(u8),
    Bin(Token, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn eval(&self) -> Option<Ratio<i64>> {
        match self {
            Expr::Num(v) => Some(Ratio::from_integer(*v as i64)),
            Expr::Bin(op, l, r) => {
                let (a, b) = (l.eval()?, r.eval()?);
                match *op {
                    tokens::PLUS => Some(a + b),
                    tokens::MINUS => Some(a - b),
                    tokens::TIMES => Some(a * b),
                    tokens::DIVIDE => (b != Ratio::from_integer(0)).then(|| a / b),
                    _ => unreachable!(),
                }
            }
        }
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Num(_) => 3,
            Expr::Bin(op, _, _) if *op == tokens::TIMES || *op == tokens::DIVIDE => 2,
            Expr::Bin(..) => 1,
        }
    }

    /// Minimal-paren infix rendering that re-parses to the same tree under
    /// standard precedence and left associativity.
    fn tokens(&self, out: &mut Vec<Token>) {
        match self {
            Expr::Num(v) => out.push(Token::number(*v)),
            Expr::Bin(op, l, r) => {
                let p = self.prec();
                let lp = l.prec() < p;
                let rp = r.prec() <= p;
                if lp {
                    out.push(tokens::LPAREN);
                }
                l.tokens(out);
                if lp {
                    out.push(tokens::RPAREN);
                }
                out.push(*op);
                if rp {
                    out.push(tokens::LPAREN);
                }
                r.tokens(out);
                if rp {
                    out.push(tokens::RPAREN);
                }
            }
        }
    }
}

const OPS: [Token; 4] = [tokens::PLUS, tokens::MINUS, tokens::TIMES, tokens::DIVIDE];

fn enumerate_trees(values: &[u8]) -> Vec<Expr> {
    if values.len() == 1 {
        return vec![Expr::Num(values[0])];
    }
    let mut out = Vec::new();
    for split in 1..values.len() {
        for l in enumerate_trees(&values[..split]) {
            for r in enumerate_trees(&values[split..]) {
                for op in OPS {
                    out.push(Expr::Bin(op, Box::new(l.clone()), Box::new(r.clone())));
                }
            }
        }
    }
    out
}

fn permutations(values: &[u8]) -> Vec<Vec<u8>> {
    fn rec(values: &[u8], used: &mut Vec<bool>, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if cur.len() == values.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..values.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            cur.push(values[i]);
            rec(values, used, cur, out);
            cur.pop();
            used[i] = false;
        }
    }
    let mut out = Vec::new();
    rec(
        values,
        &mut vec![false; values.len()],
        &mut Vec::new(),
        &mut out,
    );
    out.sort();
    out.dedup(); // identical card values collapse
    out
}

/// Exhaustive solver over every expression formable from a non-empty subset
/// of the cards. Returns the witness action sequence (ending in "="), picking
/// the shortest and then lexicographically smallest (by token string) one.
pub fn solve(cards: [u8; 4]) -> Option<Vec<Token>> {
    let mut best: Option<Vec<Token>> = None;
    for mask in 1u8..16 {
        let subset: Vec<u8> = (0..4)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| cards[i])
            .collect();
        for perm in permutations(&subset) {
            for tree in enumerate_trees(&perm) {
                if tree.eval() != Some(Ratio::from_integer(TARGET)) {
                    continue;
                }
                let mut toks = Vec::new();
                tree.tokens(&mut toks);
                toks.push(tokens::EQUALS);
                if toks.len() as u8 > MAX_STEPS {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let key = |t: &[Token]| {
                            (t.len(), t.iter().map(|x| x.as_str()).collect::<Vec<_>>())
                        };
                        key(&toks) < key(b)
                    }
                };
                if better {
                    best = Some(toks);
                }
            }
        }
    }
    best
}

/// One per-step imitation record from replaying a solver witness.
#[derive(Debug, Clone)]
pub struct SftRecord {
    pub cards: [u8; 4],
    pub formula: Vec<Token>,
    pub features: Vec<f32>,
    /// Remaining witness suffix, the "plan" at this step.
    pub thought: Vec<Token>,
    pub action: Token,
}

impl SftRecord {
    /// `cards|formula|thought_tokens|action`, tokens space-separated.
    pub fn to_line(&self) -> String {
        let cards = self
            .cards
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let fmt = |ts: &[Token]| {
            ts.iter()
                .map(|t| t.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "{cards}|{}|{}|{}",
            fmt(&self.formula),
            fmt(&self.thought),
            self.action
        )
    }
}

/// Replay solver witnesses over `n_hands` freshly dealt hands; unsolvable
/// hands contribute nothing.
pub fn make_sft_dataset(n_hands: usize, rng: &mut impl Rng) -> Vec<SftRecord> {
    let env = Points24Env::default();
    let mut out = Vec::new();
    for _ in 0..n_hands {
        let mut state = env.reset(rng);
        let Some(witness) = solve(state.cards) else {
            continue;
        };
        for (j, &action) in witness.iter().enumerate() {
            out.push(SftRecord {
                cards: state.cards,
                formula: state.formula.clone(),
                features: state.features(),
                thought: witness[j..].to_vec(),
                action,
            });
            state = env
                .step(&state, action)
                .expect("witness replay stays in bounds")
                .next_state;
        }
    }
    out
}
