//! Single-function source model: tokens, statements, bindings and a
//! byte-exact renderer with span replacement and statement insertion.
//!
//! ```
//! use curricode_core::srcmodel::{parse_function, render};
//!
//! let code = "def f(x):\n    return x\n";
//! let (model, scope) = parse_function(code).unwrap();
//! assert_eq!(model.params(), ["x"]);
//! assert_eq!(render(&model).unwrap(), code);
//! assert_eq!(scope.groups.len(), 2);
//! ```

mod builtins;
pub mod scope;
pub mod syntax;
pub mod token;

use serde::Serialize;
use thiserror::Error;

pub use builtins::is_builtin;
pub use scope::{BindingGroup, Occurrence, Role, ScopeTable};
pub use syntax::is_keyword;
pub use token::{Span, Token, TokenKind};

use syntax::{Parser, Stmt, StmtKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { message: String, offset: usize },
    #[error("unsupported construct at byte {offset}: {construct}")]
    Unsupported { construct: String, offset: usize },
    #[error("not a single function definition: {0}")]
    NotAFunction(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("inconsistent model: edits overlap at byte {0}")]
    InconsistentModel(usize),
    #[error("insertion slot {slot} out of range (model has {slots} slots)")]
    BadSlot { slot: usize, slots: usize },
}

/// One statement node of the function body. Compound statements contribute
/// one node per clause header (`if ...:`, `else:`); nodes never overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatementNode {
    pub span: Span,
    /// 1 for statements directly in the function body.
    pub depth: usize,
    /// Token index range into [`FunctionModel::tokens`].
    pub tokens: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NameToken {
    pub span: Span,
    pub text: String,
}

/// A pending text replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Replacement {
    span: Span,
    text: String,
}

/// Statements to insert at a top-level slot, as `(relative depth, text)`
/// lines; depth 0 is the function body's indentation.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Insertion {
    slot: usize,
    lines: Vec<(usize, String)>,
}

#[derive(Debug, Clone)]
pub struct FunctionModel {
    source: String,
    tokens: Vec<Token>,
    name_token: NameToken,
    params: Vec<String>,
    body: Vec<StatementNode>,
    /// Byte offsets where statements may be inserted, in order; the last is
    /// the end of the body.
    slots: Vec<usize>,
    top_level: Vec<Span>,
    /// End of each top-level statement's logical line (after the newline).
    top_level_line_ends: Vec<usize>,
    inline_body: bool,
    colon: usize,
    body_indent: String,
    scope: ScopeTable,
    replacements: Vec<Replacement>,
    insertions: Vec<Insertion>,
}

/// Parse one top-level function definition.
pub fn parse_function(code: &str) -> Result<(FunctionModel, ScopeTable), ParseError> {
    let tokens = token::tokenize(code)?;
    let stmt = Parser::new(code, &tokens).parse_module()?;
    let StmtKind::FunctionDef(def) = &stmt.kind else { unreachable!("parse_module returns a def") };
    let scope = scope::analyze(code, &tokens, def)?;

    let mut body = Vec::new();
    collect_nodes(&def.body, &mut body);
    body.sort_by_key(|(s, _)| s.start);
    let body = body
        .into_iter()
        .map(|(span, depth)| StatementNode { span, depth, tokens: token_range(&tokens, span) })
        .collect();

    let line_start = |off: usize| code[..off].rfind(['\n', '\r']).map(|i| i + 1).unwrap_or(0);
    let def_line = line_start(stmt.span.start);
    let def_indent = code[def_line..stmt.span.start].to_string();
    let first = &def.body[0];
    let body_indent = if def.inline_body {
        format!("{def_indent}    ")
    } else {
        let ls = line_start(first.span.start);
        code[ls..first.span.start].to_string()
    };
    let mut slots: Vec<usize> = if def.inline_body {
        vec![first.span.start]
    } else {
        def.body.iter().filter(|s| s.first_on_line).map(|s| line_start(s.span.start)).collect()
    };
    let last = def.body.last().expect("non-empty body");
    slots.push(if def.inline_body { last.span.end } else { last.line_end.max(last.span.end) });

    let model = FunctionModel {
        source: code.to_string(),
        name_token: NameToken { span: def.name.span, text: def.name.text.clone() },
        params: def.params.iter().map(|p| p.name.text.clone()).collect(),
        body,
        slots,
        top_level: def.body.iter().map(|s| s.span).collect(),
        top_level_line_ends: def.body.iter().map(|s| s.line_end).collect(),
        inline_body: def.inline_body,
        colon: def.colon,
        body_indent,
        scope: scope.clone(),
        replacements: Vec::new(),
        insertions: Vec::new(),
        tokens,
    };
    Ok((model, scope))
}

fn collect_nodes(body: &[Stmt], out: &mut Vec<(Span, usize)>) {
    syntax::walk_stmts(body, &mut |s: &Stmt| {
        if s.headers.is_empty() {
            out.push((s.span, s.depth));
        } else {
            for h in &s.headers {
                out.push((*h, s.depth));
            }
        }
    });
}

fn token_range(tokens: &[Token], span: Span) -> std::ops::Range<usize> {
    let lo = tokens.partition_point(|t| t.span.start < span.start);
    let hi = tokens.partition_point(|t| t.span.start < span.end);
    lo..hi
}

impl FunctionModel {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn name_token(&self) -> &NameToken {
        &self.name_token
    }

    pub fn name(&self) -> &str {
        &self.name_token.text
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    pub fn body(&self) -> &[StatementNode] {
        &self.body
    }

    pub fn scope(&self) -> &ScopeTable {
        &self.scope
    }

    /// Spans of the statements directly in the function body.
    pub fn top_level_statements(&self) -> &[Span] {
        &self.top_level
    }

    /// Span of a leading string-literal statement in the body, if any.
    pub fn docstring(&self) -> Option<Span> {
        let first = *self.top_level.first()?;
        let mut toks = self
            .tokens
            .iter()
            .filter(|t| first.contains(t.span) && !matches!(t.kind, TokenKind::Newline | TokenKind::Indent | TokenKind::Dedent))
            .peekable();
        toks.peek()?;
        toks.all(|t| t.kind == TokenKind::String && !t.is_fstring()).then_some(first)
    }

    /// Source text with the leading docstring statement removed: its lines
    /// are deleted when it stands alone, otherwise it becomes `pass`.
    pub fn without_docstring(&self) -> Option<String> {
        let span = self.docstring()?;
        let src = &self.source;
        let line_start = src[..span.start].rfind(['\n', '\r']).map(|i| i + 1).unwrap_or(0);
        let line_end = self.top_level_line_ends[0];
        let alone = !self.inline_body
            && self.top_level.len() > 1
            && line_end <= self.top_level[1].start
            && ends_with_newline(&src[..line_end])
            && src[line_start..span.start].trim().is_empty();
        Some(if alone {
            format!("{}{}", &src[..line_start], &src[line_end..])
        } else {
            format!("{}pass{}", &src[..span.start], &src[span.end..])
        })
    }

    /// Number of top-level insertion slots (statement boundaries that start
    /// a line, plus the end of the body).
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn has_edits(&self) -> bool {
        !self.replacements.is_empty() || !self.insertions.is_empty()
    }

    /// Replace the text of `span` on render.
    pub fn replace(&mut self, span: Span, text: impl Into<String>) {
        self.replacements.push(Replacement { span, text: text.into() });
    }

    /// Insert statement lines at a top-level slot on render. Multiple
    /// insertions at one slot keep their call order.
    pub fn insert(&mut self, slot: usize, lines: Vec<(usize, String)>) -> Result<(), RenderError> {
        if slot >= self.slots.len() {
            return Err(RenderError::BadSlot { slot, slots: self.slots.len() });
        }
        self.insertions.push(Insertion { slot, lines });
        Ok(())
    }

    /// Render pending edits and parse the result into a fresh model.
    pub fn commit(&self) -> Result<(FunctionModel, ScopeTable), CommitError> {
        let text = render(self)?;
        parse_function(&text).map_err(|e| CommitError::Reparse { error: e, text })
    }

    fn indent_unit(&self) -> &'static str {
        if self.body_indent.contains('\t') {
            "\t"
        } else {
            "    "
        }
    }

    fn format_lines(&self, lines: &[(usize, String)], leading_newline: bool) -> String {
        let unit = self.indent_unit();
        let mut out = String::new();
        for (depth, text) in lines {
            if leading_newline {
                out.push('\n');
            }
            out.push_str(&self.body_indent);
            for _ in 0..*depth {
                out.push_str(unit);
            }
            out.push_str(text);
            if !leading_newline {
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("edited text no longer parses: {error}")]
    Reparse { error: ParseError, text: String },
}

/// Render the model, applying pending replacements and insertions.
pub fn render(model: &FunctionModel) -> Result<String, RenderError> {
    if !model.has_edits() {
        return Ok(model.source.clone());
    }
    let src = &model.source;
    // (start, end, class, order, text); at one offset the inline-body line
    // break goes first, then insertions, then the body indent, then
    // replacements
    let mut ops: Vec<(usize, usize, u8, usize, String)> = Vec::new();
    for (i, r) in model.replacements.iter().enumerate() {
        ops.push((r.span.start, r.span.end, 3, i, r.text.clone()));
    }
    let n_slots = model.slots.len();
    let convert_inline = model.inline_body && !model.insertions.is_empty();
    for (i, ins) in model.insertions.iter().enumerate() {
        let pos = model.slots[ins.slot];
        let at_end = ins.slot == n_slots - 1;
        let text = if model.inline_body {
            if at_end {
                model.format_lines(&ins.lines, true)
            } else {
                model.format_lines(&ins.lines, false)
            }
        } else if at_end && !ends_with_newline(&src[..pos]) {
            model.format_lines(&ins.lines, true)
        } else {
            model.format_lines(&ins.lines, false)
        };
        ops.push((pos, pos, 1, i, text));
    }
    if convert_inline {
        // move an inline body onto its own line: `def f(): return 1`
        let body_start = model.slots[0];
        let gap = Span::new(model.colon + 1, body_start);
        ops.push((gap.start, gap.end, 0, 0, "\n".to_string()));
        ops.push((body_start, body_start, 2, 0, model.body_indent.clone()));
    }
    ops.sort_by_key(|o| (o.0, o.2, o.3));
    let mut out = String::with_capacity(src.len() + 256);
    let mut cursor = 0usize;
    for (start, end, _, _, text) in &ops {
        if *start < cursor {
            return Err(RenderError::InconsistentModel(*start));
        }
        out.push_str(&src[cursor..*start]);
        out.push_str(text);
        cursor = *end;
    }
    out.push_str(&src[cursor..]);
    Ok(out)
}

fn ends_with_newline(s: &str) -> bool {
    s.ends_with('\n') || s.ends_with('\r')
}
