//! Binding analysis: classify every identifier occurrence and group the
//! occurrences that refer to the same binding.
//!
//! Resolution follows the language's lexical scoping: a name is local to a
//! function, lambda or comprehension scope when bound there, `global` and
//! `nonlocal` declarations override that, comprehension iteration variables
//! live in their own scope, and assignment expressions inside a
//! comprehension bind in the nearest enclosing function scope.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::builtins::is_builtin;
use super::syntax::{is_keyword, Arg, Expr, FunctionDef, NameRef, Param, ParamKind, Stmt, StmtKind};
use super::token::{Span, Token, TokenKind};
use super::ParseError;

/// Names whose use makes local bindings observable by string name.
const DYNAMIC_SCOPE: &[&str] = &["locals", "vars", "eval", "exec", "globals"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    FunctionName,
    Parameter,
    Local,
    NestedDefName,
    ComprehensionTarget,
    FreeExternal,
    AttributeName,
    KeywordArgName,
    KeywordBuiltin,
    StringContent,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::FunctionName => "function-name",
            Role::Parameter => "parameter",
            Role::Local => "local",
            Role::NestedDefName => "nested-def-name",
            Role::ComprehensionTarget => "comprehension-target",
            Role::FreeExternal => "free-external",
            Role::AttributeName => "attribute-name",
            Role::KeywordArgName => "keyword-arg-name",
            Role::KeywordBuiltin => "keyword-builtin",
            Role::StringContent => "string-content",
        }
    }

    /// Roles whose binding groups identifier renaming may rewrite.
    pub fn is_renameable(self) -> bool {
        matches!(self, Role::Parameter | Role::Local | Role::NestedDefName | Role::ComprehensionTarget)
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub span: Span,
    pub text: String,
    pub role: Role,
    /// Binding group index; `None` for roles that are not bindings
    /// (attribute names, unlinked keyword arguments, keywords, string words,
    /// import path components).
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingGroup {
    pub id: usize,
    pub name: String,
    pub role: Role,
    /// First binding occurrence; `None` for module-level names.
    pub definition: Option<Span>,
    /// Indices into [`ScopeTable::occurrences`].
    pub occurrences: Vec<usize>,
}

/// Classified identifier occurrences in source order plus binding groups
/// numbered by first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ScopeTable {
    pub occurrences: Vec<Occurrence>,
    pub groups: Vec<BindingGroup>,
}

impl ScopeTable {
    pub fn group(&self, id: usize) -> &BindingGroup {
        &self.groups[id]
    }

    pub fn occurrence_at(&self, offset: usize) -> Option<&Occurrence> {
        self.occurrences
            .binary_search_by_key(&offset, |o| o.span.start)
            .ok()
            .map(|i| &self.occurrences[i])
    }

    /// Every identifier text appearing as a name token (string words excluded).
    pub fn identifier_names(&self) -> HashSet<&str> {
        self.occurrences
            .iter()
            .filter(|o| o.role != Role::StringContent)
            .map(|o| o.text.as_str())
            .collect()
    }

    /// Names referenced but not bound by the function: module-level names
    /// other than the function itself, and imported or nonlocal bindings.
    pub fn free_names(&self) -> std::collections::BTreeSet<String> {
        self.groups
            .iter()
            .filter(|g| matches!(g.role, Role::FreeExternal | Role::KeywordBuiltin))
            .map(|g| g.name.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScopeKind {
    Module,
    Function,
    Lambda,
    Comprehension,
}

#[derive(Debug)]
struct Scope {
    kind: ScopeKind,
    parent: Option<usize>,
    bound: HashSet<String>,
    params: HashSet<String>,
    globals: HashSet<String>,
    nonlocals: HashSet<String>,
    defs: HashSet<String>,
    imported: HashSet<String>,
}

impl Scope {
    fn new(kind: ScopeKind, parent: Option<usize>) -> Self {
        Scope {
            kind,
            parent,
            bound: HashSet::new(),
            params: HashSet::new(),
            globals: HashSet::new(),
            nonlocals: HashSet::new(),
            defs: HashSet::new(),
            imported: HashSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Key {
    Global(String),
    Local(usize, String),
}

#[derive(Debug)]
enum RawKind {
    Name { scope: usize, binds: bool },
    Fixed(Role),
    Kwarg { scope: usize, callee: Option<String> },
}

#[derive(Debug)]
struct Raw {
    span: Span,
    text: String,
    kind: RawKind,
}

struct DefEntry {
    parent: usize,
    name: String,
    scope: usize,
    /// Parameters addressable by keyword (positional-or-keyword and
    /// keyword-only).
    keyword_params: Vec<String>,
}

struct Builder {
    scopes: Vec<Scope>,
    raws: Vec<Raw>,
    defs: Vec<DefEntry>,
}

impl Builder {
    fn new_scope(&mut self, kind: ScopeKind, parent: usize) -> usize {
        self.scopes.push(Scope::new(kind, Some(parent)));
        self.scopes.len() - 1
    }

    fn fixed(&mut self, n: &NameRef, role: Role) {
        self.raws.push(Raw { span: n.span, text: n.text.clone(), kind: RawKind::Fixed(role) });
    }

    fn use_name(&mut self, n: &NameRef, scope: usize) {
        self.raws.push(Raw { span: n.span, text: n.text.clone(), kind: RawKind::Name { scope, binds: false } });
    }

    fn bind_name(&mut self, n: &NameRef, scope: usize) {
        self.scopes[scope].bound.insert(n.text.clone());
        self.raws.push(Raw { span: n.span, text: n.text.clone(), kind: RawKind::Name { scope, binds: true } });
    }

    fn function_scope_for_walrus(&self, mut scope: usize) -> usize {
        while self.scopes[scope].kind == ScopeKind::Comprehension {
            scope = self.scopes[scope].parent.expect("comprehension has a parent");
        }
        scope
    }

    fn funcdef(&mut self, def: &FunctionDef, parent: usize) {
        self.param_defaults(&def.params, parent);
        for p in &def.params {
            if let Some(a) = &p.annotation {
                self.expr(a, parent);
            }
        }
        if let Some(r) = &def.returns {
            self.expr(r, parent);
        }
        for d in &def.decorators {
            self.expr(d, parent);
        }
        self.bind_name(&def.name, parent);
        self.scopes[parent].defs.insert(def.name.text.clone());
        let scope = self.new_scope(ScopeKind::Function, parent);
        self.defs.push(DefEntry {
            parent,
            name: def.name.text.clone(),
            scope,
            keyword_params: def
                .params
                .iter()
                .filter(|p| matches!(p.kind, ParamKind::Normal | ParamKind::KeywordOnly))
                .map(|p| p.name.text.clone())
                .collect(),
        });
        self.params(&def.params, scope);
        self.body(&def.body, scope);
    }

    fn param_defaults(&mut self, params: &[Param], parent: usize) {
        for p in params {
            if let Some(d) = &p.default {
                self.expr(d, parent);
            }
        }
    }

    fn params(&mut self, params: &[Param], scope: usize) {
        for p in params {
            self.scopes[scope].params.insert(p.name.text.clone());
            self.bind_name(&p.name, scope);
        }
    }

    fn body(&mut self, body: &[Stmt], scope: usize) {
        for s in body {
            self.stmt(s, scope);
        }
    }

    fn stmt(&mut self, s: &Stmt, scope: usize) {
        match &s.kind {
            StmtKind::Expr(e) => self.expr(e, scope),
            StmtKind::Assign { targets, value } => {
                for t in targets {
                    self.target(t, scope);
                }
                self.expr(value, scope);
            }
            StmtKind::AugAssign { target, value } => {
                self.target(target, scope);
                self.expr(value, scope);
            }
            StmtKind::AnnAssign { target, annotation, value } => {
                self.target(target, scope);
                self.expr(annotation, scope);
                if let Some(v) = value {
                    self.expr(v, scope);
                }
            }
            StmtKind::Return(e) => {
                if let Some(e) = e {
                    self.expr(e, scope);
                }
            }
            StmtKind::Pass | StmtKind::Break | StmtKind::Continue => {}
            StmtKind::Del(targets) => {
                for t in targets {
                    self.target(t, scope);
                }
            }
            StmtKind::Raise(es) | StmtKind::Assert(es) => {
                for e in es {
                    self.expr(e, scope);
                }
            }
            StmtKind::Global(names) => {
                for n in names {
                    self.scopes[scope].globals.insert(n.text.clone());
                    self.use_name(n, scope);
                }
            }
            StmtKind::Nonlocal(names) => {
                for n in names {
                    self.scopes[scope].nonlocals.insert(n.text.clone());
                    self.use_name(n, scope);
                }
            }
            StmtKind::Import { module_path, names } => {
                for n in module_path {
                    self.fixed(n, Role::FreeExternal);
                }
                for imp in names {
                    for n in &imp.path {
                        self.fixed(n, Role::FreeExternal);
                    }
                    self.scopes[scope].imported.insert(imp.bound.text.clone());
                    self.bind_name(&imp.bound, scope);
                }
            }
            StmtKind::If { test, body, orelse } | StmtKind::While { test, body, orelse } => {
                self.expr(test, scope);
                self.body(body, scope);
                self.body(orelse, scope);
            }
            StmtKind::For { target, iter, body, orelse } => {
                self.target(target, scope);
                self.expr(iter, scope);
                self.body(body, scope);
                self.body(orelse, scope);
            }
            StmtKind::With { items, body } => {
                for (ctx, target) in items {
                    self.expr(ctx, scope);
                    if let Some(t) = target {
                        self.target(t, scope);
                    }
                }
                self.body(body, scope);
            }
            StmtKind::Try { body, handlers, orelse, finalbody } => {
                self.body(body, scope);
                for h in handlers {
                    if let Some(k) = &h.kind {
                        self.expr(k, scope);
                    }
                    if let Some(n) = &h.name {
                        self.bind_name(n, scope);
                    }
                    self.body(&h.body, scope);
                }
                self.body(orelse, scope);
                self.body(finalbody, scope);
            }
            StmtKind::FunctionDef(def) => self.funcdef(def, scope),
        }
    }

    fn target(&mut self, e: &Expr, scope: usize) {
        match e {
            Expr::Name(n) => self.bind_name(n, scope),
            Expr::Seq(items) => {
                for i in items {
                    self.target(i, scope);
                }
            }
            Expr::Starred(inner) => self.target(inner, scope),
            other => self.expr(other, scope),
        }
    }

    fn expr(&mut self, e: &Expr, scope: usize) {
        match e {
            Expr::Name(n) => self.use_name(n, scope),
            Expr::Keyword(_) | Expr::Const => {}
            Expr::FString(parts) | Expr::Seq(parts) | Expr::Other(parts) => {
                for p in parts {
                    self.expr(p, scope);
                }
            }
            Expr::Attribute { value, attr } => {
                self.expr(value, scope);
                self.fixed(attr, Role::AttributeName);
            }
            Expr::Subscript { value, index } => {
                self.expr(value, scope);
                self.expr(index, scope);
            }
            Expr::Call { func, args } => {
                self.expr(func, scope);
                let callee = match func.as_ref() {
                    Expr::Name(n) => Some(n.text.clone()),
                    _ => None,
                };
                for a in args {
                    match a {
                        Arg::Positional(v) | Arg::Star(v) | Arg::DoubleStar(v) => self.expr(v, scope),
                        Arg::Keyword(name, v) => {
                            self.raws.push(Raw {
                                span: name.span,
                                text: name.text.clone(),
                                kind: RawKind::Kwarg { scope, callee: callee.clone() },
                            });
                            self.expr(v, scope);
                        }
                    }
                }
            }
            Expr::Starred(inner) => self.expr(inner, scope),
            Expr::Lambda(l) => {
                self.param_defaults(&l.params, scope);
                let child = self.new_scope(ScopeKind::Lambda, scope);
                self.params(&l.params, child);
                self.expr(&l.body, child);
            }
            Expr::Comp(c) => {
                let first = &c.generators[0];
                self.expr(&first.iter, scope);
                let child = self.new_scope(ScopeKind::Comprehension, scope);
                for (i, g) in c.generators.iter().enumerate() {
                    self.target(&g.target, child);
                    if i > 0 {
                        self.expr(&g.iter, child);
                    }
                    for cond in &g.ifs {
                        self.expr(cond, child);
                    }
                }
                for el in &c.elements {
                    self.expr(el, child);
                }
            }
            Expr::Named { target, value } => {
                self.expr(value, scope);
                let owner = self.function_scope_for_walrus(scope);
                self.scopes[owner].bound.insert(target.text.clone());
                self.raws.push(Raw {
                    span: target.span,
                    text: target.text.clone(),
                    kind: RawKind::Name { scope, binds: true },
                });
            }
        }
    }

    /// Resolve `name` used in `scope`; the flag reports whether the path
    /// crossed a `nonlocal` declaration.
    fn resolve(&self, scope: usize, name: &str) -> (Key, bool) {
        let s = &self.scopes[scope];
        if s.kind == ScopeKind::Module || s.globals.contains(name) {
            return (Key::Global(name.to_string()), false);
        }
        let mut marked = s.nonlocals.contains(name);
        if !marked && s.bound.contains(name) {
            return (Key::Local(scope, name.to_string()), false);
        }
        let mut p = s.parent;
        while let Some(pi) = p {
            let ps = &self.scopes[pi];
            if ps.kind == ScopeKind::Module || ps.globals.contains(name) {
                break;
            }
            if ps.nonlocals.contains(name) {
                marked = true;
            } else if ps.bound.contains(name) {
                return (Key::Local(pi, name.to_string()), marked);
            }
            p = ps.parent;
        }
        (Key::Global(name.to_string()), false)
    }
}

fn string_words(src: &str, tok: &Token, out: &mut Vec<(Span, String)>) {
    let bytes = src.as_bytes();
    let body_start = tok.span.start + tok.prefix_len;
    let raw = src[tok.span.start..body_start].to_ascii_lowercase().contains('r');
    let mut i = body_start;
    let mut fields = tok.fields.iter().peekable();
    while i < tok.span.end {
        if let Some(f) = fields.peek() {
            if i >= f.span.start {
                i = i.max(f.span.end);
                fields.next();
                continue;
            }
        }
        let c = bytes[i];
        if c == b'\\' && !raw {
            i += 2;
            continue;
        }
        let ch = src[i..].chars().next().unwrap();
        if ch == '_' || ch.is_alphabetic() {
            let start = i;
            let limit = fields.peek().map(|f| f.span.start).unwrap_or(tok.span.end);
            let mut j = i;
            for c in src[i..limit].chars() {
                if c == '_' || c.is_alphanumeric() {
                    j += c.len_utf8();
                } else {
                    break;
                }
            }
            out.push((Span::new(start, j), src[start..j].to_string()));
            i = j;
        } else {
            i += ch.len_utf8();
        }
    }
}

fn all_tokens<'t>(tokens: &'t [Token], out: &mut Vec<&'t Token>) {
    for t in tokens {
        out.push(t);
        for f in &t.fields {
            all_tokens(&f.tokens, out);
        }
    }
}

/// Build the scope table for a parsed top-level function definition.
pub fn analyze(src: &str, tokens: &[Token], def: &FunctionDef) -> Result<ScopeTable, ParseError> {
    let mut b = Builder { scopes: vec![Scope::new(ScopeKind::Module, None)], raws: Vec::new(), defs: Vec::new() };
    b.funcdef(def, 0);

    let fname = def.name.text.as_str();
    let mut nonlocal_marked: HashSet<Key> = HashSet::new();
    let mut resolved: Vec<(Span, String, Option<Key>, Option<Role>, bool)> = Vec::new();
    for r in &b.raws {
        match &r.kind {
            RawKind::Name { scope, binds } => {
                let (key, marked) = b.resolve(*scope, &r.text);
                if marked {
                    nonlocal_marked.insert(key.clone());
                }
                if let Key::Global(name) = &key {
                    if DYNAMIC_SCOPE.contains(&name.as_str()) && is_builtin(name) {
                        return Err(ParseError::Unsupported {
                            construct: format!("dynamic scope access via {name}()"),
                            offset: r.span.start,
                        });
                    }
                }
                resolved.push((r.span, r.text.clone(), Some(key), None, *binds));
            }
            RawKind::Fixed(role) => resolved.push((r.span, r.text.clone(), None, Some(*role), false)),
            RawKind::Kwarg { .. } => {}
        }
    }

    let scopes = &b.scopes;
    let role_of = |key: &Key| -> Role {
        match key {
            Key::Global(name) => {
                if name == fname {
                    Role::FunctionName
                } else if is_builtin(name) {
                    Role::KeywordBuiltin
                } else {
                    Role::FreeExternal
                }
            }
            Key::Local(s, name) => {
                let sc = &scopes[*s];
                if sc.imported.contains(name) || nonlocal_marked.contains(key) {
                    Role::FreeExternal
                } else if sc.params.contains(name) {
                    Role::Parameter
                } else if sc.kind == ScopeKind::Comprehension {
                    Role::ComprehensionTarget
                } else if sc.defs.contains(name) {
                    Role::NestedDefName
                } else {
                    Role::Local
                }
            }
        }
    };

    // keyword arguments link to the parameter of a definition in this snippet
    for r in &b.raws {
        let RawKind::Kwarg { scope, callee } = &r.kind else { continue };
        let mut linked = None;
        if let Some(callee) = callee {
            let (ckey, _) = b.resolve(*scope, callee);
            if matches!(role_of(&ckey), Role::NestedDefName | Role::FunctionName) {
                let defs: Vec<&DefEntry> =
                    b.defs.iter().filter(|d| d.name == *callee && b.resolve(d.parent, &d.name).0 == ckey).collect();
                if let Some(first) = defs.first() {
                    if first.keyword_params.contains(&r.text) {
                        if defs.len() > 1 {
                            return Err(ParseError::Unsupported {
                                construct: "keyword argument to a name with several definitions".into(),
                                offset: r.span.start,
                            });
                        }
                        linked = Some(b.resolve(first.scope, &r.text).0);
                    }
                }
            }
        }
        match linked {
            Some(key) => resolved.push((r.span, r.text.clone(), Some(key), None, false)),
            None => resolved.push((r.span, r.text.clone(), None, Some(Role::KeywordArgName), false)),
        }
    }

    let mut all = Vec::new();
    all_tokens(tokens, &mut all);
    for t in &all {
        match t.kind {
            TokenKind::Name if is_keyword(t.text(src)) => {
                resolved.push((t.span, t.text(src).to_string(), None, Some(Role::KeywordBuiltin), false));
            }
            TokenKind::String => {
                let mut words = Vec::new();
                string_words(src, t, &mut words);
                for (span, text) in words {
                    resolved.push((span, text, None, Some(Role::StringContent), false));
                }
            }
            _ => {}
        }
    }

    resolved.sort_by_key(|r| r.0.start);
    for w in resolved.windows(2) {
        if w[0].0.start == w[1].0.start {
            return Err(ParseError::Unsupported {
                construct: format!("identifier {:?} classified twice", w[0].1),
                offset: w[0].0.start,
            });
        }
    }

    let mut group_ids: BTreeMap<Key, usize> = BTreeMap::new();
    let mut table = ScopeTable::default();
    for (span, text, key, role, binds) in resolved {
        let idx = table.occurrences.len();
        match key {
            Some(key) => {
                let role = role_of(&key);
                let next = table.groups.len();
                let gid = *group_ids.entry(key.clone()).or_insert(next);
                if gid == next {
                    table.groups.push(BindingGroup {
                        id: gid,
                        name: text.clone(),
                        role,
                        definition: None,
                        occurrences: Vec::new(),
                    });
                }
                let g = &mut table.groups[gid];
                g.occurrences.push(idx);
                if binds && g.definition.is_none() && matches!(key, Key::Local(..)) {
                    g.definition = Some(span);
                }
                table.occurrences.push(Occurrence { span, text, role, group: Some(gid) });
            }
            None => {
                table.occurrences.push(Occurrence { span, text, role: role.expect("fixed role"), group: None });
            }
        }
    }

    let classified: HashSet<usize> = table.occurrences.iter().map(|o| o.span.start).collect();
    for t in &all {
        if t.kind == TokenKind::Name && !classified.contains(&t.span.start) {
            return Err(ParseError::Unsupported {
                construct: format!("identifier {:?} outside the analyzed subset", t.text(src)),
                offset: t.span.start,
            });
        }
    }
    Ok(table)
}
