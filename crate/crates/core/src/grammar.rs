//! Production grammar over SQL trees and the depth-first action encoding used
//! by the decoder.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::sql::{self, AggFn, CmpOp, ColRef, Cond, Direction, GroupBy, Item, Operand, OrderBy, Query, SetOp, Sql};

const SQL_RULES: &str = include_str!("../grammar/sql.rules");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TerminalKind {
    Column,
    Table,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    NonTerminal(usize),
    Terminal(TerminalKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub lhs: usize,
    pub name: String,
    pub children: Vec<Symbol>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    nonterminals: Vec<String>,
    rules: Vec<Rule>,
    by_lhs: Vec<Vec<usize>>,
    by_name: HashMap<String, usize>,
}

impl Grammar {
    /// The bundled SQL grammar.
    pub fn sql() -> Grammar {
        Grammar::parse(SQL_RULES).expect("bundled grammar is well-formed")
    }

    /// Parses `lhs -> Name(child, ...)` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Grammar> {
        let mut lines = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (lhs, rhs) = line
                .split_once("->")
                .ok_or_else(|| Error::Grammar(format!("line {}: missing `->`", n + 1)))?;
            let rhs = rhs.trim();
            let (name, children) = match rhs.split_once('(') {
                Some((name, rest)) => {
                    let inner = rest
                        .strip_suffix(')')
                        .ok_or_else(|| Error::Grammar(format!("line {}: unbalanced parentheses", n + 1)))?;
                    let children: Vec<String> = inner.split(',').map(|s| s.trim().to_string()).collect();
                    if children.iter().any(String::is_empty) {
                        return Err(Error::Grammar(format!("line {}: empty child", n + 1)));
                    }
                    (name.trim(), children)
                }
                None => (rhs, Vec::new()),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(Error::Grammar(format!("line {}: bad constructor `{name}`", n + 1)));
            }
            lines.push((lhs.trim().to_string(), name.to_string(), children));
        }
        let mut nonterminals: Vec<String> = Vec::new();
        for (lhs, _, _) in &lines {
            if !nonterminals.contains(lhs) {
                nonterminals.push(lhs.clone());
            }
        }
        if nonterminals.is_empty() {
            return Err(Error::Grammar("no rules".into()));
        }
        let mut rules = Vec::new();
        for (lhs, name, children) in lines {
            let children = children
                .iter()
                .map(|c| match c.as_str() {
                    "Column" => Ok(Symbol::Terminal(TerminalKind::Column)),
                    "Table" => Ok(Symbol::Terminal(TerminalKind::Table)),
                    "Value" => Ok(Symbol::Terminal(TerminalKind::Value)),
                    other => nonterminals
                        .iter()
                        .position(|n| n == other)
                        .map(Symbol::NonTerminal)
                        .ok_or_else(|| Error::Grammar(format!("`{other}` has no rules"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let lhs = nonterminals.iter().position(|n| *n == lhs).unwrap_or(0);
            rules.push(Rule { lhs, name, children });
        }
        Grammar::build(nonterminals, rules)
    }

    fn build(nonterminals: Vec<String>, rules: Vec<Rule>) -> Result<Grammar> {
        let mut by_lhs = vec![Vec::new(); nonterminals.len()];
        let mut by_name = HashMap::new();
        for (id, r) in rules.iter().enumerate() {
            by_lhs[r.lhs].push(id);
            if by_name.insert(r.name.clone(), id).is_some() {
                return Err(Error::Grammar(format!("duplicate constructor `{}`", r.name)));
            }
        }
        if let Some(empty) = by_lhs.iter().position(Vec::is_empty) {
            return Err(Error::Grammar(format!("`{}` has no rules", nonterminals[empty])));
        }
        Ok(Grammar {
            nonterminals,
            rules,
            by_lhs,
            by_name,
        })
    }

    /// Keeps the rules accepted by `keep` and drops nonterminals that become
    /// unreachable from the root. Fails if a reachable nonterminal loses all
    /// of its rules.
    pub fn prune(&self, keep: impl Fn(&Rule) -> bool) -> Result<Grammar> {
        let kept: Vec<&Rule> = self.rules.iter().filter(|r| keep(r)).collect();
        let mut reachable = BTreeSet::from([0usize]);
        let mut work = vec![0usize];
        while let Some(nt) = work.pop() {
            for r in kept.iter().filter(|r| r.lhs == nt) {
                for c in &r.children {
                    if let Symbol::NonTerminal(n) = c {
                        if reachable.insert(*n) {
                            work.push(*n);
                        }
                    }
                }
            }
        }
        let order: Vec<usize> = reachable.into_iter().collect();
        let remap: HashMap<usize, usize> = order.iter().enumerate().map(|(new, old)| (*old, new)).collect();
        let nonterminals = order.iter().map(|&o| self.nonterminals[o].clone()).collect();
        let rules = kept
            .into_iter()
            .filter(|r| remap.contains_key(&r.lhs))
            .map(|r| Rule {
                lhs: remap[&r.lhs],
                name: r.name.clone(),
                children: r
                    .children
                    .iter()
                    .map(|c| match c {
                        Symbol::NonTerminal(n) => Symbol::NonTerminal(remap[n]),
                        t => *t,
                    })
                    .collect(),
            })
            .collect();
        Grammar::build(nonterminals, rules)
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, id: usize) -> &Rule {
        &self.rules[id]
    }

    pub fn num_rules(&self) -> usize {
        self.rules.len()
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn rules_for(&self, nonterminal: usize) -> &[usize] {
        &self.by_lhs[nonterminal]
    }

    pub fn rule_id(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Grammar(format!("no rule `{name}`")))
    }

    /// Number of distinct frontier symbols: nonterminals plus three terminal kinds.
    pub fn num_symbols(&self) -> usize {
        self.nonterminals.len() + 3
    }

    pub fn symbol_index(&self, s: Symbol) -> usize {
        match s {
            Symbol::NonTerminal(n) => n,
            Symbol::Terminal(TerminalKind::Column) => self.nonterminals.len(),
            Symbol::Terminal(TerminalKind::Table) => self.nonterminals.len() + 1,
            Symbol::Terminal(TerminalKind::Value) => self.nonterminals.len() + 2,
        }
    }

    /// Human-readable rules file.
    pub fn to_rules_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            out.push_str(&self.nonterminals[r.lhs]);
            out.push_str(" -> ");
            out.push_str(&r.name);
            if !r.children.is_empty() {
                let names: Vec<String> = r
                    .children
                    .iter()
                    .map(|c| match c {
                        Symbol::NonTerminal(n) => self.nonterminals[*n].clone(),
                        Symbol::Terminal(k) => format!("{k:?}"),
                    })
                    .collect();
                out.push('(');
                out.push_str(&names.join(", "));
                out.push(')');
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    ApplyRule(usize),
    SelectColumn(usize),
    SelectTable(usize),
    /// The single literal placeholder; the id is always 0.
    SelectValue(usize),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::ApplyRule(r) => write!(f, "ApplyRule({r})"),
            Action::SelectColumn(c) => write!(f, "SelectColumn({c})"),
            Action::SelectTable(t) => write!(f, "SelectTable({t})"),
            Action::SelectValue(v) => write!(f, "SelectValue({v})"),
        }
    }
}

/// Flattened action ids: rules, then columns, then tables, then the value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionSpace {
    pub rules: usize,
    pub columns: usize,
    pub tables: usize,
}

impl ActionSpace {
    pub fn new(grammar: &Grammar, schema: &Schema) -> Self {
        ActionSpace {
            rules: grammar.num_rules(),
            columns: schema.columns.len(),
            tables: schema.tables.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.rules + self.columns + self.tables + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, a: Action) -> usize {
        match a {
            Action::ApplyRule(r) => r,
            Action::SelectColumn(c) => self.rules + c,
            Action::SelectTable(t) => self.rules + self.columns + t,
            Action::SelectValue(v) => self.rules + self.columns + self.tables + v,
        }
    }

    pub fn action(&self, id: usize) -> Action {
        if id < self.rules {
            Action::ApplyRule(id)
        } else if id < self.rules + self.columns {
            Action::SelectColumn(id - self.rules)
        } else if id < self.rules + self.columns + self.tables {
            Action::SelectTable(id - self.rules - self.columns)
        } else {
            Action::SelectValue(id - self.rules - self.columns - self.tables)
        }
    }

    pub fn all(&self) -> impl Iterator<Item = Action> + '_ {
        (0..self.len()).map(|i| self.action(i))
    }
}

/// Legal actions at the frontier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActionMask {
    Rules(Vec<usize>),
    Columns(usize),
    Tables(usize),
    Value,
}

impl ActionMask {
    pub fn actions(&self) -> Vec<Action> {
        match self {
            ActionMask::Rules(r) => r.iter().map(|&r| Action::ApplyRule(r)).collect(),
            ActionMask::Columns(n) => (0..*n).map(Action::SelectColumn).collect(),
            ActionMask::Tables(n) => (0..*n).map(Action::SelectTable).collect(),
            ActionMask::Value => vec![Action::SelectValue(0)],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ActionMask::Rules(r) => r.len(),
            ActionMask::Columns(n) | ActionMask::Tables(n) => *n,
            ActionMask::Value => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, a: Action) -> bool {
        match (self, a) {
            (ActionMask::Rules(r), Action::ApplyRule(x)) => r.contains(&x),
            (ActionMask::Columns(n), Action::SelectColumn(c)) => c < *n,
            (ActionMask::Tables(n), Action::SelectTable(t)) => t < *n,
            (ActionMask::Value, Action::SelectValue(0)) => true,
            _ => false,
        }
    }

    /// Position of `a` among [`ActionMask::actions`].
    pub fn position(&self, a: Action) -> Option<usize> {
        match (self, a) {
            (ActionMask::Rules(r), Action::ApplyRule(x)) => r.iter().position(|&y| y == x),
            (ActionMask::Columns(n), Action::SelectColumn(c)) if c < *n => Some(c),
            (ActionMask::Tables(n), Action::SelectTable(t)) if t < *n => Some(t),
            (ActionMask::Value, Action::SelectValue(0)) => Some(0),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Pending {
    symbol: Symbol,
    parent_step: Option<usize>,
}

/// Partial tree under depth-first, left-to-right construction.
#[derive(Clone, Debug)]
pub struct AstState {
    grammar: Arc<Grammar>,
    columns: usize,
    tables: usize,
    stack: Vec<Pending>,
    actions: Vec<Action>,
    symbols: Vec<Symbol>,
    parents: Vec<Option<usize>>,
}

impl AstState {
    pub fn new(grammar: Arc<Grammar>, schema: &Schema) -> Self {
        AstState::with_bounds(grammar, schema.columns.len(), schema.tables.len())
    }

    pub fn with_bounds(grammar: Arc<Grammar>, columns: usize, tables: usize) -> Self {
        let root = grammar.root();
        AstState {
            grammar,
            columns,
            tables,
            stack: vec![Pending {
                symbol: Symbol::NonTerminal(root),
                parent_step: None,
            }],
            actions: Vec::new(),
            symbols: Vec::new(),
            parents: Vec::new(),
        }
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn is_complete(&self) -> bool {
        self.stack.is_empty()
    }

    /// Symbol to be expanded next.
    pub fn frontier(&self) -> Option<Symbol> {
        self.stack.last().map(|p| p.symbol)
    }

    /// Step that created the frontier node; `None` for the root.
    pub fn frontier_parent(&self) -> Option<usize> {
        self.stack.last().and_then(|p| p.parent_step)
    }

    pub fn step(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Frontier symbol that step `t` expanded.
    pub fn symbol_at(&self, t: usize) -> Symbol {
        self.symbols[t]
    }

    /// Parent step of the node completed at step `t`.
    pub fn parent_of(&self, t: usize) -> Option<usize> {
        self.parents[t]
    }

    pub fn valid_actions(&self) -> Result<ActionMask> {
        let top = self
            .stack
            .last()
            .ok_or_else(|| Error::InvalidAction {
                step: self.step(),
                message: "tree is complete".into(),
            })?;
        Ok(match top.symbol {
            Symbol::NonTerminal(n) => ActionMask::Rules(self.grammar.rules_for(n).to_vec()),
            Symbol::Terminal(TerminalKind::Column) => ActionMask::Columns(self.columns),
            Symbol::Terminal(TerminalKind::Table) => ActionMask::Tables(self.tables),
            Symbol::Terminal(TerminalKind::Value) => ActionMask::Value,
        })
    }

    pub fn apply(&mut self, action: Action) -> Result<()> {
        let step = self.step();
        let bad = |message: String| Error::InvalidAction { step, message };
        let top = *self
            .stack
            .last()
            .ok_or_else(|| bad("actions after completion".into()))?;
        let children: &[Symbol] = match (top.symbol, action) {
            (Symbol::NonTerminal(n), Action::ApplyRule(r)) => {
                let rule = self
                    .grammar
                    .rules
                    .get(r)
                    .ok_or_else(|| bad(format!("rule id {r} out of range")))?;
                if rule.lhs != n {
                    return Err(bad(format!(
                        "rule `{}` does not expand `{}`",
                        rule.name, self.grammar.nonterminals[n]
                    )));
                }
                &self.grammar.rules[r].children
            }
            (Symbol::Terminal(TerminalKind::Column), Action::SelectColumn(c)) if c < self.columns => &[],
            (Symbol::Terminal(TerminalKind::Table), Action::SelectTable(t)) if t < self.tables => &[],
            (Symbol::Terminal(TerminalKind::Value), Action::SelectValue(0)) => &[],
            (s, a) => return Err(bad(format!("{a} is not legal at frontier {s:?}"))),
        };
        let pushed: Vec<Pending> = children
            .iter()
            .rev()
            .map(|&symbol| Pending {
                symbol,
                parent_step: Some(step),
            })
            .collect();
        self.stack.pop();
        self.stack.extend(pushed);
        self.actions.push(action);
        self.symbols.push(top.symbol);
        self.parents.push(top.parent_step);
        Ok(())
    }
}

/// Free-standing form of [`AstState::valid_actions`].
pub fn valid_actions(state: &AstState) -> Result<ActionMask> {
    state.valid_actions()
}

// ---------------------------------------------------------------- trees

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Rule { rule: usize, children: Vec<Node> },
    Leaf(Action),
}

impl Node {
    pub fn actions(&self) -> Vec<Action> {
        let mut out = Vec::new();
        self.push_actions(&mut out);
        out
    }

    fn push_actions(&self, out: &mut Vec<Action>) {
        match self {
            Node::Rule { rule, children } => {
                out.push(Action::ApplyRule(*rule));
                for c in children {
                    c.push_actions(out);
                }
            }
            Node::Leaf(a) => out.push(*a),
        }
    }
}

/// Rebuilds the tree from a complete action sequence.
pub fn actions_to_tree(actions: &[Action], grammar: &Arc<Grammar>, schema: &Schema) -> Result<Node> {
    if actions.is_empty() {
        return Err(Error::InvalidAction {
            step: 0,
            message: "incomplete tree".into(),
        });
    }
    let mut state = AstState::new(grammar.clone(), schema);
    for &a in actions {
        state.apply(a)?;
    }
    if !state.is_complete() {
        return Err(Error::InvalidAction {
            step: actions.len(),
            message: "incomplete tree".into(),
        });
    }
    fn build(actions: &[Action], pos: &mut usize, grammar: &Grammar) -> Node {
        let a = actions[*pos];
        *pos += 1;
        match a {
            Action::ApplyRule(r) => {
                let n = grammar.rules[r].children.len();
                let children = (0..n).map(|_| build(actions, pos, grammar)).collect();
                Node::Rule { rule: r, children }
            }
            leaf => Node::Leaf(leaf),
        }
    }
    let mut pos = 0;
    Ok(build(actions, &mut pos, grammar))
}

struct ToTree<'g> {
    g: &'g Grammar,
}

impl ToTree<'_> {
    fn node(&self, name: &str, children: Vec<Node>) -> Result<Node> {
        Ok(Node::Rule {
            rule: self.g.rule_id(name)?,
            children,
        })
    }

    fn sql(&self, s: &Sql) -> Result<Node> {
        let q = self.query(&s.query)?;
        match &s.compound {
            None => self.node("Single", vec![q]),
            Some((op, rhs)) => {
                let name = match op {
                    SetOp::Intersect => "Intersect",
                    SetOp::Union => "Union",
                    SetOp::Except => "Except",
                };
                let r = self.sql(rhs)?;
                self.node(name, vec![q, r])
            }
        }
    }

    fn list<T>(&self, xs: &[T], end: &str, cons: &str, f: impl Fn(&T) -> Result<Node>) -> Result<Node> {
        let (last, init) = xs
            .split_last()
            .ok_or_else(|| Error::Grammar(format!("empty list for `{end}`")))?;
        let mut acc = self.node(end, vec![f(last)?])?;
        for x in init.iter().rev() {
            acc = self.node(cons, vec![f(x)?, acc])?;
        }
        Ok(acc)
    }

    fn query(&self, q: &Query) -> Result<Node> {
        let items = self.list(&q.select, "ItemsEnd", "ItemsCons", |i| self.item(i))?;
        let select = self.node(if q.distinct { "SelectDistinct" } else { "Select" }, vec![items])?;
        let tables = self.list(&q.from, "TablesEnd", "TablesCons", |&t| Ok(Node::Leaf(Action::SelectTable(t))))?;
        let filter = match &q.filter {
            None => self.node("NoWhere", vec![])?,
            Some(c) => {
                let c = self.cond(c)?;
                self.node("Where", vec![c])?
            }
        };
        let group = match &q.group {
            None => self.node("NoGroup", vec![])?,
            Some(g) => {
                let cols = self.list(&g.columns, "ColumnsEnd", "ColumnsCons", |&c| {
                    Ok(Node::Leaf(Action::SelectColumn(c)))
                })?;
                let having = match &g.having {
                    None => self.node("NoHaving", vec![])?,
                    Some(h) => {
                        let h = self.cond(h)?;
                        self.node("Having", vec![h])?
                    }
                };
                self.node("GroupBy", vec![cols, having])?
            }
        };
        let order = match &q.order {
            None => self.node("NoOrder", vec![])?,
            Some(o) => {
                let items = self.list(&o.items, "ItemsEnd", "ItemsCons", |i| self.item(i))?;
                let dir = self.node(
                    match o.direction {
                        Direction::Asc => "Asc",
                        Direction::Desc => "Desc",
                    },
                    vec![],
                )?;
                self.node("OrderBy", vec![items, dir])?
            }
        };
        let limit = if q.limit {
            self.node("Limit", vec![Node::Leaf(Action::SelectValue(0))])?
        } else {
            self.node("NoLimit", vec![])?
        };
        self.node("Query", vec![select, tables, filter, group, order, limit])
    }

    fn item(&self, i: &Item) -> Result<Node> {
        let col = match i.col {
            ColRef::Star => self.node("Star", vec![])?,
            ColRef::Column(c) => self.node("ColumnRef", vec![Node::Leaf(Action::SelectColumn(c))])?,
        };
        match i.agg {
            None => self.node("Plain", vec![col]),
            Some(f) => {
                let name = match f {
                    AggFn::Max => "Max",
                    AggFn::Min => "Min",
                    AggFn::Count => "Count",
                    AggFn::Sum => "Sum",
                    AggFn::Avg => "Avg",
                };
                let f = self.node(name, vec![])?;
                self.node(if i.distinct { "AggDistinct" } else { "Agg" }, vec![f, col])
            }
        }
    }

    fn operand(&self, o: &Operand) -> Result<Node> {
        match o {
            Operand::Value => self.node("Literal", vec![Node::Leaf(Action::SelectValue(0))]),
            Operand::Column(c) => self.node("ColumnOperand", vec![Node::Leaf(Action::SelectColumn(*c))]),
            Operand::Nested(s) => {
                let s = self.sql(s)?;
                self.node("Nested", vec![s])
            }
        }
    }

    fn cond(&self, c: &Cond) -> Result<Node> {
        match c {
            Cond::And(a, b) => {
                let (a, b) = (self.cond(a)?, self.cond(b)?);
                self.node("And", vec![a, b])
            }
            Cond::Or(a, b) => {
                let (a, b) = (self.cond(a)?, self.cond(b)?);
                self.node("Or", vec![a, b])
            }
            Cond::Compare(op, i, o) => {
                let name = match op {
                    CmpOp::Eq => "Eq",
                    CmpOp::Ne => "Ne",
                    CmpOp::Lt => "Lt",
                    CmpOp::Gt => "Gt",
                    CmpOp::Le => "Le",
                    CmpOp::Ge => "Ge",
                };
                let op = self.node(name, vec![])?;
                let (i, o) = (self.item(i)?, self.operand(o)?);
                self.node("Compare", vec![op, i, o])
            }
            Cond::Between(i, a, b) => {
                let (i, a, b) = (self.item(i)?, self.operand(a)?, self.operand(b)?);
                self.node("Between", vec![i, a, b])
            }
            Cond::In(i, o) | Cond::NotIn(i, o) | Cond::Like(i, o) | Cond::NotLike(i, o) => {
                let name = match c {
                    Cond::In(..) => "In",
                    Cond::NotIn(..) => "NotIn",
                    Cond::Like(..) => "Like",
                    _ => "NotLike",
                };
                let (i, o) = (self.item(i)?, self.operand(o)?);
                self.node(name, vec![i, o])
            }
        }
    }
}

pub fn sql_to_tree(sql: &Sql, grammar: &Grammar) -> Result<Node> {
    ToTree { g: grammar }.sql(sql)
}

struct FromTree<'g> {
    g: &'g Grammar,
}

impl<'g> FromTree<'g> {
    fn split<'n>(&self, n: &'n Node) -> Result<(&'g str, &'n [Node])>
    where
        'g: 'n,
    {
        match n {
            Node::Rule { rule, children } => Ok((self.g.rules[*rule].name.as_str(), children)),
            Node::Leaf(a) => Err(Error::Grammar(format!("expected a rule node, found {a}"))),
        }
    }

    fn unexpected(name: &str, wanted: &str) -> Error {
        Error::Grammar(format!("constructor `{name}` where {wanted} was expected"))
    }

    fn sql(&self, n: &Node) -> Result<Sql> {
        let (name, ch) = self.split(n)?;
        let query = self.query(&ch[0])?;
        let op = match name {
            "Single" => return Ok(Sql { query, compound: None }),
            "Intersect" => SetOp::Intersect,
            "Union" => SetOp::Union,
            "Except" => SetOp::Except,
            other => return Err(Self::unexpected(other, "a statement")),
        };
        Ok(Sql {
            query,
            compound: Some((op, Box::new(self.sql(&ch[1])?))),
        })
    }

    fn list<T>(&self, n: &Node, end: &str, cons: &str, f: &impl Fn(&Node) -> Result<T>) -> Result<Vec<T>> {
        let mut out = Vec::new();
        let mut cur = n;
        loop {
            let (name, ch) = self.split(cur)?;
            if name == end {
                out.push(f(&ch[0])?);
                return Ok(out);
            }
            if name != cons {
                return Err(Self::unexpected(name, end));
            }
            out.push(f(&ch[0])?);
            cur = &ch[1];
        }
    }

    fn leaf(n: &Node) -> Result<Action> {
        match n {
            Node::Leaf(a) => Ok(*a),
            Node::Rule { .. } => Err(Error::Grammar("expected a terminal".into())),
        }
    }

    fn column(n: &Node) -> Result<usize> {
        match Self::leaf(n)? {
            Action::SelectColumn(c) => Ok(c),
            a => Err(Error::Grammar(format!("expected a column, found {a}"))),
        }
    }

    fn query(&self, n: &Node) -> Result<Query> {
        let (name, ch) = self.split(n)?;
        if name != "Query" {
            return Err(Self::unexpected(name, "Query"));
        }
        let (sel, sel_ch) = self.split(&ch[0])?;
        let distinct = sel == "SelectDistinct";
        let select = self.list(&sel_ch[0], "ItemsEnd", "ItemsCons", &|n| self.item(n))?;
        let from = self.list(&ch[1], "TablesEnd", "TablesCons", &|n| match Self::leaf(n)? {
            Action::SelectTable(t) => Ok(t),
            a => Err(Error::Grammar(format!("expected a table, found {a}"))),
        })?;
        let (w, w_ch) = self.split(&ch[2])?;
        let filter = match w {
            "NoWhere" => None,
            _ => Some(self.cond(&w_ch[0])?),
        };
        let (g, g_ch) = self.split(&ch[3])?;
        let group = match g {
            "NoGroup" => None,
            _ => {
                let columns = self.list(&g_ch[0], "ColumnsEnd", "ColumnsCons", &Self::column)?;
                let (h, h_ch) = self.split(&g_ch[1])?;
                let having = match h {
                    "NoHaving" => None,
                    _ => Some(self.cond(&h_ch[0])?),
                };
                Some(GroupBy { columns, having })
            }
        };
        let (o, o_ch) = self.split(&ch[4])?;
        let order = match o {
            "NoOrder" => None,
            _ => {
                let items = self.list(&o_ch[0], "ItemsEnd", "ItemsCons", &|n| self.item(n))?;
                let (d, _) = self.split(&o_ch[1])?;
                Some(OrderBy {
                    items,
                    direction: if d == "Desc" { Direction::Desc } else { Direction::Asc },
                })
            }
        };
        let (l, _) = self.split(&ch[5])?;
        Ok(Query {
            distinct,
            select,
            from,
            filter,
            group,
            order,
            limit: l == "Limit",
        })
    }

    fn colref(&self, n: &Node) -> Result<ColRef> {
        let (name, ch) = self.split(n)?;
        match name {
            "Star" => Ok(ColRef::Star),
            "ColumnRef" => Ok(ColRef::Column(Self::column(&ch[0])?)),
            other => Err(Self::unexpected(other, "a column reference")),
        }
    }

    fn item(&self, n: &Node) -> Result<Item> {
        let (name, ch) = self.split(n)?;
        match name {
            "Plain" => Ok(Item {
                agg: None,
                distinct: false,
                col: self.colref(&ch[0])?,
            }),
            "Agg" | "AggDistinct" => {
                let (f, _) = self.split(&ch[0])?;
                let agg = match f {
                    "Max" => AggFn::Max,
                    "Min" => AggFn::Min,
                    "Count" => AggFn::Count,
                    "Sum" => AggFn::Sum,
                    "Avg" => AggFn::Avg,
                    other => return Err(Self::unexpected(other, "an aggregate")),
                };
                Ok(Item {
                    agg: Some(agg),
                    distinct: name == "AggDistinct",
                    col: self.colref(&ch[1])?,
                })
            }
            other => Err(Self::unexpected(other, "a select item")),
        }
    }

    fn operand(&self, n: &Node) -> Result<Operand> {
        let (name, ch) = self.split(n)?;
        match name {
            "Literal" => Ok(Operand::Value),
            "ColumnOperand" => Ok(Operand::Column(Self::column(&ch[0])?)),
            "Nested" => Ok(Operand::Nested(Box::new(self.sql(&ch[0])?))),
            other => Err(Self::unexpected(other, "an operand")),
        }
    }

    fn cond(&self, n: &Node) -> Result<Cond> {
        let (name, ch) = self.split(n)?;
        Ok(match name {
            "And" => Cond::And(Box::new(self.cond(&ch[0])?), Box::new(self.cond(&ch[1])?)),
            "Or" => Cond::Or(Box::new(self.cond(&ch[0])?), Box::new(self.cond(&ch[1])?)),
            "Compare" => {
                let (op, _) = self.split(&ch[0])?;
                let op = match op {
                    "Eq" => CmpOp::Eq,
                    "Ne" => CmpOp::Ne,
                    "Lt" => CmpOp::Lt,
                    "Gt" => CmpOp::Gt,
                    "Le" => CmpOp::Le,
                    "Ge" => CmpOp::Ge,
                    other => return Err(Self::unexpected(other, "a comparison")),
                };
                Cond::Compare(op, self.item(&ch[1])?, self.operand(&ch[2])?)
            }
            "Between" => Cond::Between(self.item(&ch[0])?, self.operand(&ch[1])?, self.operand(&ch[2])?),
            "In" => Cond::In(self.item(&ch[0])?, self.operand(&ch[1])?),
            "NotIn" => Cond::NotIn(self.item(&ch[0])?, self.operand(&ch[1])?),
            "Like" => Cond::Like(self.item(&ch[0])?, self.operand(&ch[1])?),
            "NotLike" => Cond::NotLike(self.item(&ch[0])?, self.operand(&ch[1])?),
            other => return Err(Self::unexpected(other, "a condition")),
        })
    }
}

pub fn tree_to_sql(tree: &Node, grammar: &Grammar) -> Result<Sql> {
    FromTree { g: grammar }.sql(tree)
}

pub fn sql_to_actions(src: &str, schema: &Schema, grammar: &Grammar) -> Result<Vec<Action>> {
    let sql = sql::parse(src, schema)?;
    Ok(sql_to_tree(&sql, grammar)?.actions())
}

pub fn actions_to_ast(actions: &[Action], schema: &Schema, grammar: &Arc<Grammar>) -> Result<Sql> {
    let tree = actions_to_tree(actions, grammar, schema)?;
    tree_to_sql(&tree, grammar)
}

pub fn actions_to_sql(actions: &[Action], schema: &Schema, grammar: &Arc<Grammar>) -> Result<String> {
    Ok(sql::render(&actions_to_ast(actions, schema, grammar)?, schema))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::tests::tiny_schema;

    #[test]
    fn bundled_grammar_is_dense_and_complete() {
        let g = Grammar::sql();
        assert_eq!(g.nonterminals()[g.root()], "sql");
        for nt in 0..g.nonterminals().len() {
            assert!(!g.rules_for(nt).is_empty());
        }
        assert_eq!(Grammar::parse(&g.to_rules_text()).unwrap(), g);
    }

    #[test]
    fn simple_query_action_shape() {
        let g = Arc::new(Grammar::sql());
        let s = tiny_schema();
        let actions = sql_to_actions("SELECT name FROM singer", &s, &g).unwrap();
        let rule = |n: &str| Action::ApplyRule(g.rule_id(n).unwrap());
        assert_eq!(
            actions,
            vec![
                rule("Single"),
                rule("Query"),
                rule("Select"),
                rule("ItemsEnd"),
                rule("Plain"),
                rule("ColumnRef"),
                Action::SelectColumn(0),
                rule("TablesEnd"),
                Action::SelectTable(0),
                rule("NoWhere"),
                rule("NoGroup"),
                rule("NoOrder"),
                rule("NoLimit"),
            ]
        );
        assert_eq!(actions_to_sql(&actions, &s, &g).unwrap(), "SELECT name FROM singer");
    }

    #[test]
    fn incomplete_and_overlong_sequences_fail() {
        let g = Arc::new(Grammar::sql());
        let s = tiny_schema();
        let err = actions_to_sql(&[], &s, &g).unwrap_err();
        assert!(err.to_string().contains("incomplete tree"));
        let mut actions = sql_to_actions("SELECT name FROM singer", &s, &g).unwrap();
        assert!(actions_to_sql(&actions[..5], &s, &g).unwrap_err().to_string().contains("incomplete tree"));
        actions.push(Action::SelectTable(0));
        assert!(actions_to_sql(&actions, &s, &g)
            .unwrap_err()
            .to_string()
            .contains("actions after completion"));
    }

    #[test]
    fn fresh_state_allows_only_root_rules() {
        let g = Arc::new(Grammar::sql());
        let s = tiny_schema();
        let st = AstState::new(g.clone(), &s);
        let mask = st.valid_actions().unwrap();
        let names: Vec<&str> = mask
            .actions()
            .iter()
            .map(|a| match a {
                Action::ApplyRule(r) => g.rule(*r).name.as_str(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(names, ["Single", "Intersect", "Union", "Except"]);
    }

    #[test]
    fn parents_precede_children() {
        let g = Arc::new(Grammar::sql());
        let s = tiny_schema();
        let actions = sql_to_actions("SELECT name, count(*) FROM singer WHERE age > 3 ORDER BY age DESC", &s, &g).unwrap();
        let mut st = AstState::new(g, &s);
        for a in actions {
            st.apply(a).unwrap();
        }
        for t in 0..st.step() {
            if let Some(p) = st.parent_of(t) {
                assert!(p < t);
            } else {
                assert_eq!(t, 0);
            }
        }
    }

    #[test]
    fn pruning_renumbers_and_validates() {
        let g = Grammar::sql();
        let small = g
            .prune(|r| !matches!(r.name.as_str(), "Intersect" | "Union" | "Except" | "Where" | "Having"))
            .unwrap();
        assert!(small.rule_id("Where").is_err());
        assert!(!small.nonterminals().iter().any(|n| n == "cond"));
        assert!(g.prune(|r| r.name != "NoLimit" && r.name != "Limit").is_err());
    }
}
