//! Python tokenizer with byte-accurate spans.
//!
//! Comments, blank lines and intra-bracket newlines are not emitted; they
//! live in the gaps between token spans, which is what makes rendering a
//! byte-exact round trip. Interpolation fields of f-strings are tokenized
//! recursively and attached to the string token.

use serde::{Deserialize, Serialize};

use super::ParseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, other: Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Name,
    Number,
    String,
    Op,
    Newline,
    Indent,
    Dedent,
    EndMarker,
}

/// One interpolation expression inside an f-string (a replacement field or
/// a field nested in a format spec).
#[derive(Debug, Clone)]
pub struct FStringField {
    pub span: Span,
    pub tokens: Vec<Token>,
    /// `{expr=}` fields echo their own source text.
    pub self_documenting: bool,
}

#[derive(Debug, Clone)]
pub struct Token {
    pub kind: TokenKind,
    pub span: Span,
    /// Present for f-strings only; fields in source order.
    pub fields: Vec<FStringField>,
    /// Prefix length for string tokens (`rb"` has prefix 2).
    pub prefix_len: usize,
}

impl Token {
    fn simple(kind: TokenKind, start: usize, end: usize) -> Self {
        Token { kind, span: Span::new(start, end), fields: Vec::new(), prefix_len: 0 }
    }

    pub fn text<'a>(&self, src: &'a str) -> &'a str {
        &src[self.span.start..self.span.end]
    }

    pub fn is_op(&self, src: &str, op: &str) -> bool {
        self.kind == TokenKind::Op && self.text(src) == op
    }

    pub fn is_fstring(&self) -> bool {
        self.kind == TokenKind::String && !self.fields.is_empty()
    }
}

const OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "==", "!=", "<=", ">=", "**", "//", "<<", ">>",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=", "+", "-", "*", "/", "%", "@", "&", "|",
    "^", "~", "<", ">", "(", ")", "[", "]", "{", "}", ",", ":", ".", ";", "=",
];

const STRING_PREFIXES: &[&str] = &["r", "u", "f", "b", "br", "rb", "fr", "rf"];

fn is_ident_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    end: usize,
    tokens: Vec<Token>,
    indents: Vec<usize>,
    depth: usize,
    /// Expression mode: no NEWLINE/INDENT processing (f-string fields).
    expr_mode: bool,
}

/// Tokenize a full source text.
pub fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut lx = Lexer {
        src,
        pos: 0,
        end: src.len(),
        tokens: Vec::new(),
        indents: vec![0],
        depth: 0,
        expr_mode: false,
    };
    lx.run()?;
    Ok(lx.tokens)
}

/// Tokenize the expression text of an f-string field.
fn tokenize_expr(src: &str, span: Span) -> Result<Vec<Token>, ParseError> {
    let mut lx = Lexer {
        src,
        pos: span.start,
        end: span.end,
        tokens: Vec::new(),
        indents: vec![0],
        depth: 1,
        expr_mode: true,
    };
    lx.run()?;
    Ok(lx.tokens)
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        if self.pos >= self.end {
            return None;
        }
        self.src[self.pos..self.end].chars().next()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        let p = self.pos + offset;
        if p >= self.end {
            return None;
        }
        self.src[p..self.end].chars().next()
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..self.end]
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax { message: message.into(), offset: self.pos }
    }

    fn run(&mut self) -> Result<(), ParseError> {
        let mut at_line_start = !self.expr_mode;
        loop {
            if at_line_start && self.depth == 0 {
                at_line_start = false;
                if self.handle_indentation()? {
                    at_line_start = true;
                    continue;
                }
            }
            // intra-line whitespace
            while let Some(c) = self.peek() {
                if c == ' ' || c == '\t' || c == '\x0c' {
                    self.pos += 1;
                } else {
                    break;
                }
            }
            let Some(c) = self.peek() else {
                self.finish();
                return Ok(());
            };
            match c {
                '\\' => {
                    let nl = self.newline_len_at(self.pos + 1);
                    if nl == 0 {
                        return Err(self.err("unexpected character after line continuation"));
                    }
                    self.pos += 1 + nl;
                }
                '#' => {
                    while let Some(c) = self.peek() {
                        if c == '\n' || c == '\r' {
                            break;
                        }
                        self.pos += c.len_utf8();
                    }
                }
                '\n' | '\r' => {
                    let nl = self.newline_len_at(self.pos);
                    if self.depth == 0 && !self.expr_mode {
                        let start = self.pos;
                        self.pos += nl;
                        // blank lines never reach here: handled at line start
                        self.tokens.push(Token::simple(TokenKind::Newline, start, self.pos));
                        at_line_start = true;
                    } else {
                        self.pos += nl;
                    }
                }
                c if is_ident_start(c) => self.name_or_string()?,
                c if c.is_ascii_digit() => self.number(),
                '.' if self.peek_at(1).is_some_and(|d| d.is_ascii_digit()) => self.number(),
                '"' | '\'' => self.string(self.pos, 0)?,
                _ => self.operator()?,
            }
        }
    }

    fn newline_len_at(&self, p: usize) -> usize {
        let b = self.src.as_bytes();
        if p >= self.end {
            return 0;
        }
        match b[p] {
            b'\r' if p + 1 < self.end && b[p + 1] == b'\n' => 2,
            b'\r' | b'\n' => 1,
            _ => 0,
        }
    }

    /// Measure indentation at the start of a logical line. Returns true when
    /// the line was blank or comment-only and has been consumed.
    fn handle_indentation(&mut self) -> Result<bool, ParseError> {
        let mut col = 0usize;
        let mut p = self.pos;
        let bytes = self.src.as_bytes();
        while p < self.end {
            match bytes[p] {
                b' ' => col += 1,
                b'\t' => col = (col / 8 + 1) * 8,
                b'\x0c' => col = 0,
                _ => break,
            }
            p += 1;
        }
        if p >= self.end {
            self.pos = p;
            return Ok(false);
        }
        let c = bytes[p];
        if c == b'#' || c == b'\n' || c == b'\r' {
            // blank or comment-only line
            let mut q = p;
            while q < self.end && bytes[q] != b'\n' && bytes[q] != b'\r' {
                q += 1;
            }
            let nl = self.newline_len_at(q);
            self.pos = q + nl;
            if nl == 0 {
                return Ok(false);
            }
            return Ok(true);
        }
        if c == b'\\' {
            // a continuation at line start behaves like indentation
            self.pos = p;
            return Ok(false);
        }
        let top = *self.indents.last().expect("indent stack is never empty");
        if col > top {
            self.indents.push(col);
            self.tokens.push(Token::simple(TokenKind::Indent, p, p));
        } else if col < top {
            while *self.indents.last().unwrap() > col {
                self.indents.pop();
                self.tokens.push(Token::simple(TokenKind::Dedent, p, p));
            }
            if *self.indents.last().unwrap() != col {
                self.pos = p;
                return Err(self.err("unindent does not match any outer indentation level"));
            }
        }
        self.pos = p;
        Ok(false)
    }

    fn finish(&mut self) {
        if self.expr_mode {
            self.tokens.push(Token::simple(TokenKind::EndMarker, self.end, self.end));
            return;
        }
        let needs_newline = self
            .tokens
            .last()
            .is_some_and(|t| !matches!(t.kind, TokenKind::Newline | TokenKind::Dedent | TokenKind::Indent));
        if needs_newline {
            self.tokens.push(Token::simple(TokenKind::Newline, self.end, self.end));
        }
        while self.indents.len() > 1 {
            self.indents.pop();
            self.tokens.push(Token::simple(TokenKind::Dedent, self.end, self.end));
        }
        self.tokens.push(Token::simple(TokenKind::EndMarker, self.end, self.end));
    }

    fn name_or_string(&mut self) -> Result<(), ParseError> {
        let start = self.pos;
        let mut p = self.pos;
        for c in self.rest().chars() {
            if is_ident_continue(c) {
                p += c.len_utf8();
            } else {
                break;
            }
        }
        let word = &self.src[start..p];
        let next = self.src[p..self.end].chars().next();
        if matches!(next, Some('"') | Some('\'')) && STRING_PREFIXES.contains(&word.to_ascii_lowercase().as_str()) {
            return self.string(start, word.len());
        }
        self.pos = p;
        self.tokens.push(Token::simple(TokenKind::Name, start, p));
        Ok(())
    }

    fn number(&mut self) {
        let start = self.pos;
        let b = self.src.as_bytes();
        let mut p = self.pos;
        let at = |p: usize| if p < self.end { b[p] } else { 0 };
        if at(p) == b'0' && matches!(at(p + 1), b'x' | b'X' | b'o' | b'O' | b'b' | b'B') {
            p += 2;
            while at(p).is_ascii_alphanumeric() || at(p) == b'_' {
                p += 1;
            }
        } else {
            while at(p).is_ascii_digit() || at(p) == b'_' {
                p += 1;
            }
            if at(p) == b'.' {
                p += 1;
                while at(p).is_ascii_digit() || at(p) == b'_' {
                    p += 1;
                }
            }
            if matches!(at(p), b'e' | b'E')
                && (at(p + 1).is_ascii_digit() || (matches!(at(p + 1), b'+' | b'-') && at(p + 2).is_ascii_digit()))
            {
                p += 2;
                while at(p).is_ascii_digit() || at(p) == b'_' {
                    p += 1;
                }
            }
            if matches!(at(p), b'j' | b'J') {
                p += 1;
            }
        }
        self.pos = p;
        self.tokens.push(Token::simple(TokenKind::Number, start, p));
    }

    fn operator(&mut self) -> Result<(), ParseError> {
        let rest = self.rest();
        for op in OPERATORS {
            if rest.starts_with(op) {
                let start = self.pos;
                self.pos += op.len();
                match *op {
                    "(" | "[" | "{" => self.depth += 1,
                    ")" | "]" | "}" => self.depth = self.depth.saturating_sub(1),
                    _ => {}
                }
                self.tokens.push(Token::simple(TokenKind::Op, start, self.pos));
                return Ok(());
            }
        }
        Err(self.err(format!("unexpected character {:?}", self.peek().unwrap_or('\0'))))
    }

    /// Scan a string literal starting at `start`, with `prefix_len` prefix bytes.
    fn string(&mut self, start: usize, prefix_len: usize) -> Result<(), ParseError> {
        let prefix = self.src[start..start + prefix_len].to_ascii_lowercase();
        let raw = prefix.contains('r');
        let is_f = prefix.contains('f');
        let b = self.src.as_bytes();
        let qpos = start + prefix_len;
        let quote = b[qpos];
        let triple = qpos + 2 < self.end && b[qpos + 1] == quote && b[qpos + 2] == quote;
        let qlen = if triple { 3 } else { 1 };
        let mut p = qpos + qlen;
        let mut fields = Vec::new();
        loop {
            if p >= self.end {
                self.pos = start;
                return Err(self.err("unterminated string literal"));
            }
            let c = b[p];
            if c == b'\\' {
                if is_f && !raw && p + 1 < self.end && b[p + 1] == b'N' && p + 2 < self.end && b[p + 2] == b'{' {
                    // \N{NAME} escape: skip to closing brace
                    let mut q = p + 3;
                    while q < self.end && b[q] != b'}' {
                        q += 1;
                    }
                    p = q + 1;
                    continue;
                }
                p += 2;
                if p > self.end {
                    p = self.end;
                }
                // keep char boundaries for multi-byte escaped chars
                while p < self.end && !self.src.is_char_boundary(p) {
                    p += 1;
                }
                continue;
            }
            if c == quote {
                if !triple {
                    p += 1;
                    break;
                }
                if p + 2 < self.end && b[p + 1] == quote && b[p + 2] == quote {
                    p += 3;
                    break;
                }
                p += 1;
                continue;
            }
            if (c == b'\n' || c == b'\r') && !triple {
                self.pos = start;
                return Err(self.err("unterminated string literal"));
            }
            if is_f && c == b'{' {
                if p + 1 < self.end && b[p + 1] == b'{' {
                    p += 2;
                    continue;
                }
                p = self.fstring_field(p + 1, quote, triple, &mut fields)?;
                continue;
            }
            p += 1;
            while p < self.end && !self.src.is_char_boundary(p) {
                p += 1;
            }
        }
        self.pos = p;
        self.tokens.push(Token { kind: TokenKind::String, span: Span::new(start, p), fields, prefix_len });
        Ok(())
    }

    /// Scan one replacement field whose expression starts at `p`. Returns the
    /// offset just past the closing brace.
    fn fstring_field(
        &self,
        p: usize,
        quote: u8,
        triple: bool,
        fields: &mut Vec<FStringField>,
    ) -> Result<usize, ParseError> {
        let b = self.src.as_bytes();
        let expr_start = p;
        let mut q = p;
        let mut depth = 0usize;
        let mut self_doc = false;
        let expr_end;
        loop {
            if q >= self.end {
                return Err(ParseError::Syntax { message: "unterminated f-string field".into(), offset: p });
            }
            let c = b[q];
            match c {
                b'(' | b'[' | b'{' => depth += 1,
                b')' | b']' => depth = depth.saturating_sub(1),
                b'}' if depth > 0 => depth -= 1,
                b'}' => {
                    expr_end = q;
                    break;
                }
                b'\'' | b'"' => {
                    if c == quote && !triple {
                        return Err(ParseError::Syntax {
                            message: "f-string field contains the enclosing quote".into(),
                            offset: q,
                        });
                    }
                    // nested literal with the other quote kind
                    let mut r = q + 1;
                    let nested_triple = r + 1 < self.end && b[r] == c && b[r + 1] == c;
                    if nested_triple {
                        r += 2;
                        while r + 2 < self.end && !(b[r] == c && b[r + 1] == c && b[r + 2] == c) {
                            r += 1;
                        }
                        q = r + 3;
                    } else {
                        while r < self.end && b[r] != c {
                            r += 1;
                        }
                        q = r + 1;
                    }
                    continue;
                }
                b'!' if depth == 0 && q + 1 < self.end && b[q + 1] != b'=' => {
                    expr_end = q;
                    break;
                }
                b':' if depth == 0 => {
                    expr_end = q;
                    break;
                }
                b'=' if depth == 0 => {
                    let prev = if q > expr_start { b[q - 1] } else { 0 };
                    let next = if q + 1 < self.end { b[q + 1] } else { 0 };
                    if next != b'=' && !matches!(prev, b'=' | b'!' | b'<' | b'>') {
                        // self-documenting `{expr=}`
                        let mut r = q + 1;
                        while r < self.end && (b[r] == b' ' || b[r] == b'\t') {
                            r += 1;
                        }
                        if r < self.end && matches!(b[r], b'}' | b'!' | b':') {
                            self_doc = true;
                            expr_end = q;
                            q = r;
                            break;
                        }
                    } else if next == b'=' {
                        q += 2;
                        continue;
                    }
                }
                _ => {}
            }
            q += 1;
        }
        let span = Span::new(expr_start, expr_end);
        let tokens = tokenize_expr(self.src, span)?;
        fields.push(FStringField { span, tokens, self_documenting: self_doc });
        // conversion
        if q < self.end && b[q] == b'!' {
            q += 2;
        }
        // format spec, possibly with nested fields
        if q < self.end && b[q] == b':' {
            q += 1;
            loop {
                if q >= self.end {
                    return Err(ParseError::Syntax { message: "unterminated format spec".into(), offset: q });
                }
                match b[q] {
                    b'{' => {
                        q = self.fstring_field(q + 1, quote, triple, fields)?;
                    }
                    b'}' => break,
                    _ => q += 1,
                }
            }
        }
        if q >= self.end || b[q] != b'}' {
            return Err(ParseError::Syntax { message: "expected '}' in f-string".into(), offset: q });
        }
        Ok(q + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<(TokenKind, String)> {
        tokenize(src).unwrap().iter().map(|t| (t.kind, t.text(src).to_string())).collect()
    }

    #[test]
    fn indentation_and_newlines() {
        let src = "def f(x):\n    # c\n\n    return x\n";
        let ks: Vec<TokenKind> = kinds(src).into_iter().map(|k| k.0).collect();
        use TokenKind::*;
        assert_eq!(ks, vec![Name, Name, Op, Name, Op, Op, Newline, Indent, Name, Name, Newline, Dedent, EndMarker]);
    }

    #[test]
    fn bracket_continuation_suppresses_newlines() {
        let src = "x = (1,\n     2)\n";
        let n = kinds(src).iter().filter(|k| k.0 == TokenKind::Newline).count();
        assert_eq!(n, 1);
    }

    #[test]
    fn string_prefixes_and_triple_quotes() {
        let src = "a = rb'x\\'' + '''q\n'''\n";
        let strings: Vec<String> =
            kinds(src).into_iter().filter(|k| k.0 == TokenKind::String).map(|k| k.1).collect();
        assert_eq!(strings, vec!["rb'x\\''".to_string(), "'''q\n'''".to_string()]);
    }

    #[test]
    fn fstring_fields_are_tokenized() {
        let src = "f\"{a:>{w}} {b!r} {{lit}} {c['k']}\"";
        let toks = tokenize(src).unwrap();
        let fields: Vec<&str> = toks[0].fields.iter().map(|f| &src[f.span.start..f.span.end]).collect();
        assert_eq!(fields, vec!["a", "w", "b", "c['k']"]);
        assert_eq!(toks[0].fields[3].tokens[0].text(src), "c");
    }

    #[test]
    fn self_documenting_field_is_flagged() {
        let toks = tokenize("f'{x=}'").unwrap();
        assert!(toks[0].fields[0].self_documenting);
        let toks = tokenize("f'{x == y}'").unwrap();
        assert!(!toks[0].fields[0].self_documenting);
    }

    #[test]
    fn numbers() {
        let src = "1_000 0x1F 3.5e-2 .5 2j 1.";
        let nums: Vec<String> = kinds(src).into_iter().filter(|k| k.0 == TokenKind::Number).map(|k| k.1).collect();
        assert_eq!(nums, vec!["1_000", "0x1F", "3.5e-2", ".5", "2j", "1."]);
    }

    #[test]
    fn bad_dedent_is_an_error() {
        assert!(tokenize("if x:\n    a\n  b\n").is_err());
    }

    #[test]
    fn unicode_identifiers() {
        let src = "données = 1\n";
        assert_eq!(kinds(src)[0].1, "données");
    }
}
