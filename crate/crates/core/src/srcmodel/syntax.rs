//! Recursive-descent parser for the supported Python subset.
//!
//! The tree keeps only what binding analysis and statement insertion need:
//! identifier spans, binding positions, scopes (defs, lambdas,
//! comprehensions) and statement extents. Everything else collapses into
//! [`Expr::Other`].

use super::token::{Span, Token, TokenKind};
use super::ParseError;

pub const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue",
    "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in",
    "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while", "with",
    "yield",
];

pub fn is_keyword(s: &str) -> bool {
    KEYWORDS.contains(&s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameRef {
    pub span: Span,
    pub text: String,
}

#[derive(Debug, Clone)]
pub enum Arg {
    Positional(Expr),
    Star(Expr),
    Keyword(NameRef, Expr),
    DoubleStar(Expr),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: NameRef,
    pub kind: ParamKind,
    pub annotation: Option<Expr>,
    pub default: Option<Expr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    PositionalOnly,
    Normal,
    VarArgs,
    KeywordOnly,
    VarKeywords,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub target: Expr,
    pub iter: Expr,
    pub ifs: Vec<Expr>,
}

#[derive(Debug, Clone)]
pub struct Comprehension {
    /// Element expressions (key then value for dict comprehensions).
    pub elements: Vec<Expr>,
    pub generators: Vec<Generator>,
    pub span: Span,
}

#[derive(Debug, Clone)]
pub struct Lambda {
    pub params: Vec<Param>,
    pub body: Expr,
    pub span: Span,
}

#[derive(Debug, Clone)]
pub enum Expr {
    Name(NameRef),
    /// Keyword constants (`None`, `True`, `False`) and other keyword tokens
    /// used as values.
    Keyword(NameRef),
    Const,
    FString(Vec<Expr>),
    Attribute { value: Box<Expr>, attr: NameRef },
    Subscript { value: Box<Expr>, index: Box<Expr> },
    Call { func: Box<Expr>, args: Vec<Arg> },
    /// Tuple or list display; valid as an assignment target.
    Seq(Vec<Expr>),
    Starred(Box<Expr>),
    Lambda(Box<Lambda>),
    Comp(Box<Comprehension>),
    Named { target: NameRef, value: Box<Expr> },
    /// Any other expression; children are evaluated in the current scope.
    Other(Vec<Expr>),
}

#[derive(Debug, Clone)]
pub struct ImportName {
    /// Names that are module path components or imported attribute names.
    pub path: Vec<NameRef>,
    /// The name bound in the current scope.
    pub bound: NameRef,
}

#[derive(Debug, Clone)]
pub struct Handler {
    pub kind: Option<Expr>,
    pub name: Option<NameRef>,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone)]
pub struct FunctionDef {
    pub decorators: Vec<Expr>,
    pub name: NameRef,
    pub params: Vec<Param>,
    pub returns: Option<Expr>,
    pub body: Vec<Stmt>,
    pub is_async: bool,
    /// Byte offset of the `:` ending the header.
    pub colon: usize,
    /// True when the body is a simple-statement suite on the header line.
    pub inline_body: bool,
}

#[derive(Debug, Clone)]
pub enum StmtKind {
    Expr(Expr),
    Assign { targets: Vec<Expr>, value: Expr },
    AugAssign { target: Expr, value: Expr },
    AnnAssign { target: Expr, annotation: Expr, value: Option<Expr> },
    Return(Option<Expr>),
    Pass,
    Break,
    Continue,
    Del(Vec<Expr>),
    Raise(Vec<Expr>),
    Assert(Vec<Expr>),
    Global(Vec<NameRef>),
    Nonlocal(Vec<NameRef>),
    Import { module_path: Vec<NameRef>, names: Vec<ImportName> },
    If { test: Expr, body: Vec<Stmt>, orelse: Vec<Stmt> },
    While { test: Expr, body: Vec<Stmt>, orelse: Vec<Stmt> },
    For { target: Expr, iter: Expr, body: Vec<Stmt>, orelse: Vec<Stmt> },
    With { items: Vec<(Expr, Option<Expr>)>, body: Vec<Stmt> },
    Try { body: Vec<Stmt>, handlers: Vec<Handler>, orelse: Vec<Stmt>, finalbody: Vec<Stmt> },
    FunctionDef(Box<FunctionDef>),
}

#[derive(Debug, Clone)]
pub struct Stmt {
    pub kind: StmtKind,
    /// From the first token (decorator `@` for decorated defs) to the end of
    /// the last token of the statement, excluding the trailing newline.
    pub span: Span,
    /// Nesting depth: 0 for the function definition itself, 1 for its body.
    pub depth: usize,
    /// First statement on its physical line.
    pub first_on_line: bool,
    /// End of the statement including its terminating newline, when the
    /// statement ends a logical line.
    pub line_end: usize,
    /// Header spans of compound statements, one per clause (`if ...:`,
    /// `else:`, `except ...:`), each ending after its colon.
    pub headers: Vec<Span>,
}

pub struct Parser<'a> {
    src: &'a str,
    toks: &'a [Token],
    pos: usize,
}

type PResult<T> = Result<T, ParseError>;

impl<'a> Parser<'a> {
    pub fn new(src: &'a str, toks: &'a [Token]) -> Self {
        Parser { src, toks, pos: 0 }
    }

    // ----- token helpers -------------------------------------------------

    fn tok(&self) -> &'a Token {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn tok_at(&self, k: usize) -> &'a Token {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)]
    }

    fn text(&self) -> &'a str {
        self.tok().text(self.src)
    }

    fn at_op(&self, op: &str) -> bool {
        self.tok().is_op(self.src, op)
    }

    fn at_kw(&self, kw: &str) -> bool {
        self.tok().kind == TokenKind::Name && self.text() == kw
    }

    fn at_kind(&self, kind: TokenKind) -> bool {
        self.tok().kind == kind
    }

    fn bump(&mut self) -> &'a Token {
        let t = self.tok();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn prev_end(&self) -> usize {
        if self.pos == 0 {
            0
        } else {
            self.toks[self.pos - 1].span.end
        }
    }

    fn error<T>(&self, message: impl Into<String>) -> PResult<T> {
        Err(ParseError::Syntax { message: message.into(), offset: self.tok().span.start })
    }

    fn unsupported<T>(&self, construct: &str) -> PResult<T> {
        Err(ParseError::Unsupported { construct: construct.to_string(), offset: self.tok().span.start })
    }

    fn expect_op(&mut self, op: &str) -> PResult<&'a Token> {
        if self.at_op(op) {
            Ok(self.bump())
        } else {
            self.error(format!("expected '{op}', found {:?}", self.text()))
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<()> {
        if self.at_kw(kw) {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected '{kw}', found {:?}", self.text()))
        }
    }

    fn name(&mut self) -> PResult<NameRef> {
        let t = self.tok();
        if t.kind == TokenKind::Name && !is_keyword(t.text(self.src)) {
            self.bump();
            Ok(NameRef { span: t.span, text: t.text(self.src).to_string() })
        } else {
            self.error(format!("expected identifier, found {:?}", self.text()))
        }
    }

    fn is_line_start(&self, offset: usize) -> bool {
        let before = &self.src[..offset];
        let line_start = before.rfind(['\n', '\r']).map(|i| i + 1).unwrap_or(0);
        if !before[line_start..].chars().all(|c| c == ' ' || c == '\t' || c == '\x0c') {
            return false;
        }
        let prev_line = before[..line_start].trim_end_matches(['\n', '\r']);
        !prev_line.ends_with('\\')
    }

    // ----- module / statements ------------------------------------------

    /// Parse a module consisting of exactly one function definition.
    pub fn parse_module(&mut self) -> PResult<Stmt> {
        if self.at_kind(TokenKind::Indent) {
            return self.error("unexpected indent");
        }
        if self.at_kind(TokenKind::EndMarker) {
            return Err(ParseError::NotAFunction("empty input".into()));
        }
        let mut stmts = Vec::new();
        while !self.at_kind(TokenKind::EndMarker) {
            stmts.extend(self.statement(0)?);
        }
        if stmts.len() != 1 {
            return Err(ParseError::NotAFunction(format!("expected one top-level definition, found {} statements", stmts.len())));
        }
        let stmt = stmts.pop().unwrap();
        if !matches!(stmt.kind, StmtKind::FunctionDef(_)) {
            return Err(ParseError::NotAFunction("top-level statement is not a function definition".into()));
        }
        Ok(stmt)
    }

    fn statement(&mut self, depth: usize) -> PResult<Vec<Stmt>> {
        if self.at_op("@") || self.at_kw("def") || (self.at_kw("async") && self.tok_at(1).text(self.src) == "def") {
            return Ok(vec![self.funcdef(depth)?]);
        }
        let compound = ["if", "while", "for", "with", "try", "class"];
        if self.tok().kind == TokenKind::Name && compound.contains(&self.text()) {
            return Ok(vec![self.compound(depth)?]);
        }
        if self.at_kw("async") && matches!(self.tok_at(1).text(self.src), "for" | "with") {
            return Ok(vec![self.compound(depth)?]);
        }
        if self.at_kw("match") && self.looks_like_match() {
            return self.unsupported("match statement");
        }
        self.simple_statements(depth)
    }

    fn looks_like_match(&self) -> bool {
        // `match <subject>:` NEWLINE INDENT
        let mut k = 1;
        let mut depth = 0i32;
        loop {
            let t = self.tok_at(k);
            match t.kind {
                TokenKind::Newline | TokenKind::EndMarker => return false,
                TokenKind::Op => {
                    let s = t.text(self.src);
                    if k == 1 && matches!(s, "=" | "." | "(" | "[" | "," | ")" | ":" | "+=" | "-=") {
                        return false;
                    }
                    match s {
                        "(" | "[" | "{" => depth += 1,
                        ")" | "]" | "}" => depth -= 1,
                        ":" if depth == 0 => {
                            return self.tok_at(k + 1).kind == TokenKind::Newline;
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
            k += 1;
        }
    }

    fn simple_statements(&mut self, depth: usize) -> PResult<Vec<Stmt>> {
        let mut out = Vec::new();
        loop {
            let start = self.tok().span.start;
            let first_on_line = self.is_line_start(start);
            let kind = self.simple_statement()?;
            let end = self.prev_end();
            out.push(Stmt { kind, span: Span::new(start, end), depth, first_on_line, line_end: end, headers: Vec::new() });
            if self.at_op(";") {
                self.bump();
                if self.at_kind(TokenKind::Newline) {
                    break;
                }
                continue;
            }
            break;
        }
        if !self.at_kind(TokenKind::Newline) {
            return self.error(format!("expected end of statement, found {:?}", self.text()));
        }
        let nl = self.bump();
        if let Some(last) = out.last_mut() {
            last.line_end = nl.span.end;
        }
        Ok(out)
    }

    fn simple_statement(&mut self) -> PResult<StmtKind> {
        let t = self.tok();
        if t.kind == TokenKind::Name {
            match t.text(self.src) {
                "pass" => {
                    self.bump();
                    return Ok(StmtKind::Pass);
                }
                "break" => {
                    self.bump();
                    return Ok(StmtKind::Break);
                }
                "continue" => {
                    self.bump();
                    return Ok(StmtKind::Continue);
                }
                "return" => {
                    self.bump();
                    if self.at_stmt_end() {
                        return Ok(StmtKind::Return(None));
                    }
                    return Ok(StmtKind::Return(Some(self.star_expressions()?)));
                }
                "del" => {
                    self.bump();
                    let mut targets = vec![self.target()?];
                    while self.at_op(",") {
                        self.bump();
                        if self.at_stmt_end() {
                            break;
                        }
                        targets.push(self.target()?);
                    }
                    return Ok(StmtKind::Del(targets));
                }
                "raise" => {
                    self.bump();
                    let mut exprs = Vec::new();
                    if !self.at_stmt_end() {
                        exprs.push(self.expression()?);
                        if self.at_kw("from") {
                            self.bump();
                            exprs.push(self.expression()?);
                        }
                    }
                    return Ok(StmtKind::Raise(exprs));
                }
                "assert" => {
                    self.bump();
                    let mut exprs = vec![self.expression()?];
                    if self.at_op(",") {
                        self.bump();
                        exprs.push(self.expression()?);
                    }
                    return Ok(StmtKind::Assert(exprs));
                }
                "global" | "nonlocal" => {
                    let is_global = t.text(self.src) == "global";
                    self.bump();
                    let mut names = vec![self.name()?];
                    while self.at_op(",") {
                        self.bump();
                        names.push(self.name()?);
                    }
                    return Ok(if is_global { StmtKind::Global(names) } else { StmtKind::Nonlocal(names) });
                }
                "import" => return self.import(),
                "from" => return self.import_from(),
                "class" => return self.unsupported("class definition"),
                _ => {}
            }
        }
        // expression / assignment
        let first = if self.at_kw("yield") { self.yield_expr()? } else { self.star_expressions()? };
        if self.at_op("=") {
            let mut parts = vec![first];
            while self.at_op("=") {
                self.bump();
                let e = if self.at_kw("yield") { self.yield_expr()? } else { self.star_expressions()? };
                parts.push(e);
            }
            let value = parts.pop().unwrap();
            return Ok(StmtKind::Assign { targets: parts, value });
        }
        if self.tok().kind == TokenKind::Op {
            let op = self.text();
            if op.len() >= 2 && op.ends_with('=') && !matches!(op, "==" | "!=" | "<=" | ">=" | ":=") {
                self.bump();
                let value = if self.at_kw("yield") { self.yield_expr()? } else { self.star_expressions()? };
                return Ok(StmtKind::AugAssign { target: first, value });
            }
        }
        if self.at_op(":") {
            self.bump();
            let annotation = self.expression()?;
            let value = if self.at_op("=") {
                self.bump();
                Some(if self.at_kw("yield") { self.yield_expr()? } else { self.star_expressions()? })
            } else {
                None
            };
            return Ok(StmtKind::AnnAssign { target: first, annotation, value });
        }
        Ok(StmtKind::Expr(first))
    }

    fn at_stmt_end(&self) -> bool {
        self.at_kind(TokenKind::Newline) || self.at_op(";") || self.at_kind(TokenKind::EndMarker)
    }

    fn dotted_name(&mut self) -> PResult<Vec<NameRef>> {
        let mut parts = vec![self.name()?];
        while self.at_op(".") {
            self.bump();
            parts.push(self.name()?);
        }
        Ok(parts)
    }

    fn import(&mut self) -> PResult<StmtKind> {
        self.bump();
        let mut names = Vec::new();
        loop {
            let mut path = self.dotted_name()?;
            let bound = if self.at_kw("as") {
                self.bump();
                self.name()?
            } else {
                path.remove(0)
            };
            names.push(ImportName { path, bound });
            if self.at_op(",") {
                self.bump();
                continue;
            }
            break;
        }
        Ok(StmtKind::Import { module_path: Vec::new(), names })
    }

    fn import_from(&mut self) -> PResult<StmtKind> {
        self.bump();
        while self.at_op(".") || self.at_op("...") {
            self.bump();
        }
        let module_path = if self.at_kw("import") { Vec::new() } else { self.dotted_name()? };
        self.expect_kw("import")?;
        if self.at_op("*") {
            return self.unsupported("star import");
        }
        let paren = self.at_op("(");
        if paren {
            self.bump();
        }
        let mut names = Vec::new();
        loop {
            if paren && self.at_op(")") {
                break;
            }
            let original = self.name()?;
            let (path, bound) = if self.at_kw("as") {
                self.bump();
                (vec![original], self.name()?)
            } else {
                (Vec::new(), original)
            };
            names.push(ImportName { path, bound });
            if self.at_op(",") {
                self.bump();
                continue;
            }
            break;
        }
        if paren {
            self.expect_op(")")?;
        }
        Ok(StmtKind::Import { module_path, names })
    }

    /// Parse an indented block or an inline simple-statement suite after ':'.
    fn block(&mut self, depth: usize) -> PResult<(Vec<Stmt>, bool)> {
        if self.at_kind(TokenKind::Newline) {
            self.bump();
            if !self.at_kind(TokenKind::Indent) {
                return self.error("expected an indented block");
            }
            self.bump();
            let mut body = Vec::new();
            while !self.at_kind(TokenKind::Dedent) && !self.at_kind(TokenKind::EndMarker) {
                body.extend(self.statement(depth)?);
            }
            if self.at_kind(TokenKind::Dedent) {
                self.bump();
            }
            Ok((body, false))
        } else {
            Ok((self.simple_statements(depth)?, true))
        }
    }

    fn last_line_end(body: &[Stmt], fallback: usize) -> usize {
        body.last().map(|s| s.line_end).unwrap_or(fallback)
    }

    fn funcdef(&mut self, depth: usize) -> PResult<Stmt> {
        let start = self.tok().span.start;
        let first_on_line = self.is_line_start(start);
        let mut decorators = Vec::new();
        while self.at_op("@") {
            self.bump();
            decorators.push(self.named_expression()?);
            if !self.at_kind(TokenKind::Newline) {
                return self.error("expected newline after decorator");
            }
            self.bump();
        }
        let is_async = self.at_kw("async");
        if is_async {
            self.bump();
        }
        if self.at_kw("class") {
            return self.unsupported("class definition");
        }
        self.expect_kw("def")?;
        let name = self.name()?;
        self.expect_op("(")?;
        let params = self.parameters(")", true)?;
        self.expect_op(")")?;
        let returns = if self.at_op("->") {
            self.bump();
            Some(self.expression()?)
        } else {
            None
        };
        let colon = self.expect_op(":")?.span.start;
        let headers = vec![Span::new(start, colon + 1)];
        let (body, inline_body) = self.block(depth + 1)?;
        let end = body.last().map(|s| s.span.end).unwrap_or(colon + 1);
        let line_end = Self::last_line_end(&body, end);
        let def = FunctionDef { decorators, name, params, returns, body, is_async, colon, inline_body };
        Ok(Stmt {
            kind: StmtKind::FunctionDef(Box::new(def)),
            span: Span::new(start, end),
            depth,
            first_on_line,
            line_end,
            headers,
        })
    }

    fn parameters(&mut self, close: &str, annotations: bool) -> PResult<Vec<Param>> {
        let mut params: Vec<Param> = Vec::new();
        let mut kind = ParamKind::Normal;
        loop {
            if self.at_op(close) {
                break;
            }
            if self.at_op("/") {
                self.bump();
                for p in params.iter_mut() {
                    p.kind = ParamKind::PositionalOnly;
                }
            } else if self.at_op("**") {
                self.bump();
                let name = self.name()?;
                let annotation = self.param_annotation(annotations)?;
                params.push(Param { name, kind: ParamKind::VarKeywords, annotation, default: None });
            } else if self.at_op("*") {
                self.bump();
                kind = ParamKind::KeywordOnly;
                if !self.at_op(",") && !self.at_op(close) {
                    let name = self.name()?;
                    let annotation = self.param_annotation(annotations)?;
                    params.push(Param { name, kind: ParamKind::VarArgs, annotation, default: None });
                }
            } else {
                let name = self.name()?;
                let annotation = self.param_annotation(annotations)?;
                let default = if self.at_op("=") {
                    self.bump();
                    Some(self.expression()?)
                } else {
                    None
                };
                params.push(Param { name, kind, annotation, default });
            }
            if self.at_op(",") {
                self.bump();
                continue;
            }
            break;
        }
        Ok(params)
    }

    fn param_annotation(&mut self, allowed: bool) -> PResult<Option<Expr>> {
        if allowed && self.at_op(":") {
            self.bump();
            Ok(Some(self.expression()?))
        } else {
            Ok(None)
        }
    }

    fn compound(&mut self, depth: usize) -> PResult<Stmt> {
        let start = self.tok().span.start;
        let first_on_line = self.is_line_start(start);
        let is_async = self.at_kw("async");
        if is_async {
            self.bump();
        }
        let kw = self.text();
        let mut headers = Vec::new();
        let kind = match kw {
            "if" => {
                self.bump();
                self.if_rest(depth, start, &mut headers)?
            }
            "while" => {
                self.bump();
                let test = self.named_expression()?;
                self.header_colon(start, &mut headers)?;
                let (body, _) = self.block(depth + 1)?;
                let orelse = self.else_block(depth, &mut headers)?;
                StmtKind::While { test, body, orelse }
            }
            "for" => {
                self.bump();
                let target = self.target_list()?;
                self.expect_kw("in")?;
                let iter = self.star_expressions()?;
                self.header_colon(start, &mut headers)?;
                let (body, _) = self.block(depth + 1)?;
                let orelse = self.else_block(depth, &mut headers)?;
                StmtKind::For { target, iter, body, orelse }
            }
            "with" => {
                self.bump();
                let items = self.with_items()?;
                self.header_colon(start, &mut headers)?;
                let (body, _) = self.block(depth + 1)?;
                StmtKind::With { items, body }
            }
            "try" => {
                self.bump();
                self.header_colon(start, &mut headers)?;
                let (body, _) = self.block(depth + 1)?;
                let mut handlers = Vec::new();
                while self.at_kw("except") {
                    let clause = self.tok().span.start;
                    self.bump();
                    if self.at_op("*") {
                        return self.unsupported("except* clause");
                    }
                    let mut kind = None;
                    let mut name = None;
                    if !self.at_op(":") {
                        kind = Some(self.expression()?);
                        if self.at_kw("as") {
                            self.bump();
                            name = Some(self.name()?);
                        } else if self.at_op(",") {
                            // `except A, B:` is a syntax error in Python 3
                            return self.error("multiple exception types must be parenthesized");
                        }
                    }
                    self.header_colon(clause, &mut headers)?;
                    let (hbody, _) = self.block(depth + 1)?;
                    handlers.push(Handler { kind, name, body: hbody });
                }
                let orelse = self.else_block(depth, &mut headers)?;
                let finalbody = if self.at_kw("finally") {
                    let clause = self.tok().span.start;
                    self.bump();
                    self.header_colon(clause, &mut headers)?;
                    self.block(depth + 1)?.0
                } else {
                    Vec::new()
                };
                if handlers.is_empty() && finalbody.is_empty() {
                    return self.error("try statement needs except or finally");
                }
                StmtKind::Try { body, handlers, orelse, finalbody }
            }
            "class" => return self.unsupported("class definition"),
            other => return self.error(format!("unexpected keyword {other:?}")),
        };
        let (end, line_end) = last_extent(&kind);
        Ok(Stmt { kind, span: Span::new(start, end), depth, first_on_line, line_end, headers })
    }

    fn header_colon(&mut self, start: usize, headers: &mut Vec<Span>) -> PResult<()> {
        let colon = self.expect_op(":")?;
        headers.push(Span::new(start, colon.span.end));
        Ok(())
    }

    fn if_rest(&mut self, depth: usize, start: usize, headers: &mut Vec<Span>) -> PResult<StmtKind> {
        let test = self.named_expression()?;
        self.header_colon(start, headers)?;
        let (body, _) = self.block(depth + 1)?;
        let orelse = if self.at_kw("elif") {
            let start = self.tok().span.start;
            self.bump();
            let mut elif_headers = Vec::new();
            let kind = self.if_rest(depth, start, &mut elif_headers)?;
            let (end, line_end) = last_extent(&kind);
            vec![Stmt {
                kind,
                span: Span::new(start, end),
                depth,
                first_on_line: true,
                line_end,
                headers: elif_headers,
            }]
        } else {
            self.else_block(depth, headers)?
        };
        Ok(StmtKind::If { test, body, orelse })
    }

    fn else_block(&mut self, depth: usize, headers: &mut Vec<Span>) -> PResult<Vec<Stmt>> {
        if self.at_kw("else") {
            let start = self.tok().span.start;
            self.bump();
            self.header_colon(start, headers)?;
            Ok(self.block(depth + 1)?.0)
        } else {
            Ok(Vec::new())
        }
    }

    fn with_items(&mut self) -> PResult<Vec<(Expr, Option<Expr>)>> {
        // parenthesized with-items: `with (a as b, c as d):`
        if self.at_op("(") && self.paren_with_items() {
            self.bump();
            let items = self.with_item_list(Some(")"))?;
            self.expect_op(")")?;
            return Ok(items);
        }
        self.with_item_list(None)
    }

    fn paren_with_items(&self) -> bool {
        // look for `as` at depth 1 before the matching ')'
        let mut depth = 0i32;
        let mut k = 0;
        loop {
            let t = self.tok_at(k);
            match t.kind {
                TokenKind::EndMarker | TokenKind::Newline => return false,
                TokenKind::Op => match t.text(self.src) {
                    "(" | "[" | "{" => depth += 1,
                    ")" | "]" | "}" => {
                        depth -= 1;
                        if depth == 0 {
                            return self.tok_at(k + 1).is_op(self.src, ":")
                                && self.scan_as_between(0, k);
                        }
                    }
                    _ => {}
                },
                _ => {}
            }
            k += 1;
        }
    }

    fn scan_as_between(&self, from: usize, to: usize) -> bool {
        let mut depth = 0i32;
        for k in from..to {
            let t = self.tok_at(k);
            match t.text(self.src) {
                "(" | "[" | "{" if t.kind == TokenKind::Op => depth += 1,
                ")" | "]" | "}" if t.kind == TokenKind::Op => depth -= 1,
                "as" if t.kind == TokenKind::Name && depth == 1 => return true,
                _ => {}
            }
        }
        false
    }

    fn with_item_list(&mut self, close: Option<&str>) -> PResult<Vec<(Expr, Option<Expr>)>> {
        let mut items = Vec::new();
        loop {
            let ctx = self.expression()?;
            let target = if self.at_kw("as") {
                self.bump();
                Some(self.target()?)
            } else {
                None
            };
            items.push((ctx, target));
            if self.at_op(",") {
                self.bump();
                if close.is_some_and(|c| self.at_op(c)) {
                    break;
                }
                continue;
            }
            break;
        }
        Ok(items)
    }

    // ----- targets --------------------------------------------------------

    /// A single assignment target (name, attribute, subscript, starred, or
    /// parenthesized/bracketed target list).
    fn target(&mut self) -> PResult<Expr> {
        if self.at_op("*") {
            self.bump();
            return Ok(Expr::Starred(Box::new(self.target()?)));
        }
        self.primary()
    }

    /// Comma-separated targets, as used by `for` and comprehensions.
    fn target_list(&mut self) -> PResult<Expr> {
        let first = self.target()?;
        if !self.at_op(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.at_op(",") {
            self.bump();
            if self.at_kw("in") || self.at_op("=") {
                break;
            }
            items.push(self.target()?);
        }
        Ok(Expr::Seq(items))
    }

    // ----- expressions ----------------------------------------------------

    fn yield_expr(&mut self) -> PResult<Expr> {
        self.expect_kw("yield")?;
        if self.at_kw("from") {
            self.bump();
            return Ok(Expr::Other(vec![self.expression()?]));
        }
        if self.at_stmt_end() || self.at_op(")") || self.at_op("=") {
            return Ok(Expr::Other(Vec::new()));
        }
        Ok(Expr::Other(vec![self.star_expressions()?]))
    }

    /// `a, *b, c`: produces a tuple when a comma is present.
    pub fn star_expressions(&mut self) -> PResult<Expr> {
        let first = self.star_expression()?;
        if !self.at_op(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.at_op(",") {
            self.bump();
            if self.expression_cannot_start() {
                break;
            }
            items.push(self.star_expression()?);
        }
        Ok(Expr::Seq(items))
    }

    fn expression_cannot_start(&self) -> bool {
        match self.tok().kind {
            TokenKind::Newline | TokenKind::EndMarker | TokenKind::Indent | TokenKind::Dedent => true,
            TokenKind::Op => matches!(
                self.text(),
                ")" | "]" | "}" | "=" | ":" | ";" | "+=" | "-=" | "*=" | "/=" | "//=" | "%=" | "**=" | ">>=" | "<<="
                    | "&=" | "|=" | "^=" | "@="
            ),
            TokenKind::Name => matches!(self.text(), "in" | "for" | "if" | "else" | "as" | "async"),
            _ => false,
        }
    }

    fn star_expression(&mut self) -> PResult<Expr> {
        if self.at_op("*") {
            self.bump();
            return Ok(Expr::Starred(Box::new(self.bitor()?)));
        }
        self.named_expression()
    }

    fn named_expression(&mut self) -> PResult<Expr> {
        if self.tok().kind == TokenKind::Name && self.tok_at(1).is_op(self.src, ":=") {
            let target = self.name()?;
            self.bump();
            let value = self.expression()?;
            return Ok(Expr::Named { target, value: Box::new(value) });
        }
        self.expression()
    }

    pub fn expression(&mut self) -> PResult<Expr> {
        if self.at_kw("lambda") {
            return self.lambda();
        }
        let body = self.disjunction()?;
        if self.at_kw("if") {
            self.bump();
            let test = self.disjunction()?;
            self.expect_kw("else")?;
            let orelse = self.expression()?;
            return Ok(Expr::Other(vec![body, test, orelse]));
        }
        Ok(body)
    }

    fn lambda(&mut self) -> PResult<Expr> {
        let start = self.tok().span.start;
        self.expect_kw("lambda")?;
        let params = self.parameters(":", false)?;
        self.expect_op(":")?;
        let body = self.expression()?;
        let end = self.prev_end();
        Ok(Expr::Lambda(Box::new(Lambda { params, body, span: Span::new(start, end) })))
    }

    fn disjunction(&mut self) -> PResult<Expr> {
        let first = self.conjunction()?;
        if !self.at_kw("or") {
            return Ok(first);
        }
        let mut parts = vec![first];
        while self.at_kw("or") {
            self.bump();
            parts.push(self.conjunction()?);
        }
        Ok(Expr::Other(parts))
    }

    fn conjunction(&mut self) -> PResult<Expr> {
        let first = self.inversion()?;
        if !self.at_kw("and") {
            return Ok(first);
        }
        let mut parts = vec![first];
        while self.at_kw("and") {
            self.bump();
            parts.push(self.inversion()?);
        }
        Ok(Expr::Other(parts))
    }

    fn inversion(&mut self) -> PResult<Expr> {
        if self.at_kw("not") {
            self.bump();
            return Ok(Expr::Other(vec![self.inversion()?]));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> PResult<Expr> {
        let first = self.bitor()?;
        let mut parts = vec![first];
        loop {
            let t = self.tok();
            let is_cmp = match t.kind {
                TokenKind::Op => matches!(self.text(), "==" | "!=" | "<" | ">" | "<=" | ">="),
                TokenKind::Name => match self.text() {
                    "in" | "is" => true,
                    "not" => self.tok_at(1).kind == TokenKind::Name && self.tok_at(1).text(self.src) == "in",
                    _ => false,
                },
                _ => false,
            };
            if !is_cmp {
                break;
            }
            if self.at_kw("not") {
                self.bump();
                self.bump();
            } else if self.at_kw("is") {
                self.bump();
                if self.at_kw("not") {
                    self.bump();
                }
            } else {
                self.bump();
            }
            parts.push(self.bitor()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Expr::Other(parts) })
    }

    fn binary(&mut self, ops: &[&str], next: fn(&mut Self) -> PResult<Expr>) -> PResult<Expr> {
        let first = next(self)?;
        let mut parts = vec![first];
        while self.tok().kind == TokenKind::Op && ops.contains(&self.text()) {
            self.bump();
            parts.push(next(self)?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Expr::Other(parts) })
    }

    fn bitor(&mut self) -> PResult<Expr> {
        self.binary(&["|"], Self::bitxor)
    }

    fn bitxor(&mut self) -> PResult<Expr> {
        self.binary(&["^"], Self::bitand)
    }

    fn bitand(&mut self) -> PResult<Expr> {
        self.binary(&["&"], Self::shift)
    }

    fn shift(&mut self) -> PResult<Expr> {
        self.binary(&["<<", ">>"], Self::sum)
    }

    fn sum(&mut self) -> PResult<Expr> {
        self.binary(&["+", "-"], Self::term)
    }

    fn term(&mut self) -> PResult<Expr> {
        self.binary(&["*", "/", "//", "%", "@"], Self::factor)
    }

    fn factor(&mut self) -> PResult<Expr> {
        if self.tok().kind == TokenKind::Op && matches!(self.text(), "+" | "-" | "~") {
            self.bump();
            return Ok(Expr::Other(vec![self.factor()?]));
        }
        self.power()
    }

    fn power(&mut self) -> PResult<Expr> {
        let base = if self.at_kw("await") {
            self.bump();
            Expr::Other(vec![self.primary()?])
        } else {
            self.primary()?
        };
        if self.at_op("**") {
            self.bump();
            let exp = self.factor()?;
            return Ok(Expr::Other(vec![base, exp]));
        }
        Ok(base)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let mut e = self.atom()?;
        loop {
            if self.at_op(".") {
                self.bump();
                let t = self.tok();
                if t.kind != TokenKind::Name {
                    return self.error("expected attribute name");
                }
                self.bump();
                let attr = NameRef { span: t.span, text: t.text(self.src).to_string() };
                e = Expr::Attribute { value: Box::new(e), attr };
            } else if self.at_op("(") {
                self.bump();
                let args = self.call_args()?;
                self.expect_op(")")?;
                e = Expr::Call { func: Box::new(e), args };
            } else if self.at_op("[") {
                self.bump();
                let index = self.slices()?;
                self.expect_op("]")?;
                e = Expr::Subscript { value: Box::new(e), index: Box::new(index) };
            } else {
                break;
            }
        }
        Ok(e)
    }

    fn slices(&mut self) -> PResult<Expr> {
        let mut items = vec![self.slice()?];
        while self.at_op(",") {
            self.bump();
            if self.at_op("]") {
                break;
            }
            items.push(self.slice()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { Expr::Other(items) })
    }

    fn slice(&mut self) -> PResult<Expr> {
        let mut parts = Vec::new();
        let mut is_slice = false;
        if !self.at_op(":") {
            parts.push(self.star_expression()?);
        }
        while self.at_op(":") {
            is_slice = true;
            self.bump();
            if !self.at_op(":") && !self.at_op("]") && !self.at_op(",") {
                parts.push(self.expression()?);
            }
        }
        if !is_slice && parts.len() == 1 {
            return Ok(parts.pop().unwrap());
        }
        Ok(Expr::Other(parts))
    }

    fn call_args(&mut self) -> PResult<Vec<Arg>> {
        let mut args = Vec::new();
        loop {
            if self.at_op(")") {
                break;
            }
            if self.at_op("*") {
                self.bump();
                args.push(Arg::Star(self.expression()?));
            } else if self.at_op("**") {
                self.bump();
                args.push(Arg::DoubleStar(self.expression()?));
            } else if self.tok().kind == TokenKind::Name
                && !is_keyword(self.text())
                && self.tok_at(1).is_op(self.src, "=")
            {
                let name = self.name()?;
                self.bump();
                args.push(Arg::Keyword(name, self.expression()?));
            } else {
                let start = self.tok().span.start;
                let e = self.named_expression()?;
                if self.at_kw("for") || (self.at_kw("async") && self.tok_at(1).text(self.src) == "for") {
                    let comp = self.comprehension(vec![e], start)?;
                    args.push(Arg::Positional(comp));
                } else {
                    args.push(Arg::Positional(e));
                }
            }
            if self.at_op(",") {
                self.bump();
                continue;
            }
            break;
        }
        Ok(args)
    }

    fn comprehension(&mut self, elements: Vec<Expr>, start: usize) -> PResult<Expr> {
        let mut generators = Vec::new();
        while self.at_kw("for") || (self.at_kw("async") && self.tok_at(1).text(self.src) == "for") {
            if self.at_kw("async") {
                self.bump();
            }
            self.bump();
            let target = self.target_list()?;
            self.expect_kw("in")?;
            let iter = self.disjunction()?;
            let mut ifs = Vec::new();
            while self.at_kw("if") {
                self.bump();
                ifs.push(self.disjunction()?);
            }
            generators.push(Generator { target, iter, ifs });
        }
        let end = self.prev_end();
        Ok(Expr::Comp(Box::new(Comprehension { elements, generators, span: Span::new(start, end) })))
    }

    fn atom(&mut self) -> PResult<Expr> {
        let t = self.tok();
        match t.kind {
            TokenKind::Name => {
                let text = t.text(self.src);
                if is_keyword(text) {
                    if matches!(text, "None" | "True" | "False") {
                        self.bump();
                        return Ok(Expr::Keyword(NameRef { span: t.span, text: text.to_string() }));
                    }
                    if text == "lambda" {
                        return self.lambda();
                    }
                    return self.error(format!("unexpected keyword {text:?}"));
                }
                self.bump();
                Ok(Expr::Name(NameRef { span: t.span, text: text.to_string() }))
            }
            TokenKind::Number => {
                self.bump();
                Ok(Expr::Const)
            }
            TokenKind::String => {
                let mut parts = Vec::new();
                while self.at_kind(TokenKind::String) {
                    let s = self.bump();
                    for field in &s.fields {
                        if field.self_documenting {
                            return Err(ParseError::Unsupported {
                                construct: "self-documenting f-string field".into(),
                                offset: field.span.start,
                            });
                        }
                        let mut sub = Parser::new(self.src, &field.tokens);
                        let e = sub.star_expressions_or_yield()?;
                        if !sub.at_kind(TokenKind::EndMarker) {
                            return sub.error("unexpected token in f-string field");
                        }
                        parts.push(e);
                    }
                }
                Ok(if parts.is_empty() { Expr::Const } else { Expr::FString(parts) })
            }
            TokenKind::Op => match t.text(self.src) {
                "(" => self.paren(),
                "[" => self.list(),
                "{" => self.brace(),
                "..." => {
                    self.bump();
                    Ok(Expr::Const)
                }
                other => self.error(format!("unexpected token {other:?}")),
            },
            TokenKind::Indent => self.error("unexpected indent"),
            _ => self.error(format!("unexpected token {:?}", self.text())),
        }
    }

    fn star_expressions_or_yield(&mut self) -> PResult<Expr> {
        if self.at_kw("yield") {
            self.yield_expr()
        } else {
            self.star_expressions()
        }
    }

    fn paren(&mut self) -> PResult<Expr> {
        let start = self.tok().span.start;
        self.expect_op("(")?;
        if self.at_op(")") {
            self.bump();
            return Ok(Expr::Seq(Vec::new()));
        }
        if self.at_kw("yield") {
            let e = self.yield_expr()?;
            self.expect_op(")")?;
            return Ok(e);
        }
        let first = self.star_expression()?;
        if self.at_kw("for") || (self.at_kw("async") && self.tok_at(1).text(self.src) == "for") {
            let comp = self.comprehension(vec![first], start)?;
            self.expect_op(")")?;
            return Ok(comp);
        }
        if self.at_op(")") {
            self.bump();
            return Ok(first);
        }
        let mut items = vec![first];
        while self.at_op(",") {
            self.bump();
            if self.at_op(")") {
                break;
            }
            items.push(self.star_expression()?);
        }
        self.expect_op(")")?;
        Ok(Expr::Seq(items))
    }

    fn list(&mut self) -> PResult<Expr> {
        let start = self.tok().span.start;
        self.expect_op("[")?;
        if self.at_op("]") {
            self.bump();
            return Ok(Expr::Seq(Vec::new()));
        }
        let first = self.star_expression()?;
        if self.at_kw("for") || (self.at_kw("async") && self.tok_at(1).text(self.src) == "for") {
            let comp = self.comprehension(vec![first], start)?;
            self.expect_op("]")?;
            return Ok(comp);
        }
        let mut items = vec![first];
        while self.at_op(",") {
            self.bump();
            if self.at_op("]") {
                break;
            }
            items.push(self.star_expression()?);
        }
        self.expect_op("]")?;
        Ok(Expr::Seq(items))
    }

    fn brace(&mut self) -> PResult<Expr> {
        let start = self.tok().span.start;
        self.expect_op("{")?;
        if self.at_op("}") {
            self.bump();
            return Ok(Expr::Other(Vec::new()));
        }
        let mut items = Vec::new();
        let first_is_dict;
        if self.at_op("**") {
            self.bump();
            items.push(self.bitor()?);
            first_is_dict = true;
        } else {
            let key = self.star_expression()?;
            if self.at_op(":") {
                self.bump();
                let value = self.expression()?;
                if self.at_kw("for") || (self.at_kw("async") && self.tok_at(1).text(self.src) == "for") {
                    let comp = self.comprehension(vec![key, value], start)?;
                    self.expect_op("}")?;
                    return Ok(comp);
                }
                items.push(key);
                items.push(value);
                first_is_dict = true;
            } else {
                if self.at_kw("for") || (self.at_kw("async") && self.tok_at(1).text(self.src) == "for") {
                    let comp = self.comprehension(vec![key], start)?;
                    self.expect_op("}")?;
                    return Ok(comp);
                }
                items.push(key);
                first_is_dict = false;
            }
        }
        while self.at_op(",") {
            self.bump();
            if self.at_op("}") {
                break;
            }
            if first_is_dict {
                if self.at_op("**") {
                    self.bump();
                    items.push(self.bitor()?);
                } else {
                    items.push(self.expression()?);
                    self.expect_op(":")?;
                    items.push(self.expression()?);
                }
            } else {
                items.push(self.star_expression()?);
            }
        }
        self.expect_op("}")?;
        Ok(Expr::Other(items))
    }
}

fn last_extent(kind: &StmtKind) -> (usize, usize) {
    let blocks: Vec<&Vec<Stmt>> = match kind {
        StmtKind::If { body, orelse, .. }
        | StmtKind::While { body, orelse, .. }
        | StmtKind::For { body, orelse, .. } => vec![body, orelse],
        StmtKind::With { body, .. } => vec![body],
        StmtKind::Try { body, handlers, orelse, finalbody } => {
            let mut v = vec![body];
            v.extend(handlers.iter().map(|h| &h.body));
            v.push(orelse);
            v.push(finalbody);
            v
        }
        StmtKind::FunctionDef(def) => vec![&def.body],
        _ => vec![],
    };
    let mut best = (0, 0);
    for b in blocks {
        if let Some(s) = b.last() {
            if s.span.end >= best.0 {
                best = (s.span.end, s.line_end);
            }
        }
    }
    best
}

/// Visit every statement of a body recursively, in source order.
pub fn walk_stmts<'s>(body: &'s [Stmt], f: &mut dyn FnMut(&'s Stmt)) {
    for s in body {
        f(s);
        match &s.kind {
            StmtKind::If { body, orelse, .. }
            | StmtKind::While { body, orelse, .. }
            | StmtKind::For { body, orelse, .. } => {
                walk_stmts(body, f);
                walk_stmts(orelse, f);
            }
            StmtKind::With { body, .. } => walk_stmts(body, f),
            StmtKind::Try { body, handlers, orelse, finalbody } => {
                walk_stmts(body, f);
                for h in handlers {
                    walk_stmts(&h.body, f);
                }
                walk_stmts(orelse, f);
                walk_stmts(finalbody, f);
            }
            StmtKind::FunctionDef(def) => walk_stmts(&def.body, f),
            _ => {}
        }
    }
}
