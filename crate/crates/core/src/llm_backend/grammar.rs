//! Line-oriented output grammars for each stage.
//!
//! ```text
//! GROUPS                      STEPS
//! tableware: fork, mug        put_on(table, group:tableware)
//! END                         put_near(group:a, group:b) -> left_of
//!                             END
//! PREFERENCE: <one line>      PROFILES
//! TAGS: no_stacking, tidy     pref-1, pref-2: <one line>
//!                             END
//! ```
//!
//! Blank lines and Markdown code fences around a block are ignored.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::planner::{ActionStep, Primitive};
use crate::scene_graph::{NodeId, RelationKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileItem {
    pub parents: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "payload", rename_all = "snake_case")]
pub enum StagePayload {
    Groups(Vec<(String, Vec<NodeId>)>),
    Steps(Vec<ActionStep>),
    Summary { text: String, tags: Vec<String> },
    Profile(Vec<ProfileItem>),
}

/// Grammar violation with a 1-based location in the raw output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

fn err(line: usize, column: usize, message: impl Into<String>) -> ParseError {
    ParseError { line, column, message: message.into(), token: None }
}

/// Canonical text for a payload; `parse_stage_output` inverts it.
pub fn render(payload: &StagePayload) -> String {
    let mut out = String::new();
    match payload {
        StagePayload::Groups(groups) => {
            out.push_str("GROUPS\n");
            for (cat, members) in groups {
                out.push_str(&format!("{cat}: {}\n", members.join(", ")));
            }
            out.push_str("END\n");
        }
        StagePayload::Steps(steps) => {
            out.push_str("STEPS\n");
            for s in steps {
                out.push_str(&format!("{s}\n"));
            }
            out.push_str("END\n");
        }
        StagePayload::Summary { text, tags } => {
            out.push_str(&format!("PREFERENCE: {text}\nTAGS: {}\n", tags.join(", ")));
        }
        StagePayload::Profile(items) => {
            out.push_str("PROFILES\n");
            for item in items {
                out.push_str(&format!("{}: {}\n", item.parents.join(", "), item.text));
            }
            out.push_str("END\n");
        }
    }
    out
}

struct Lines<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
    eof_line: usize,
}

impl<'a> Lines<'a> {
    fn new(raw: &'a str) -> Self {
        let all: Vec<(usize, &str)> = raw.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end())).collect();
        let eof_line = all.len() + 1;
        let lines =
            all.into_iter().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with("```")).collect();
        Self { lines, pos: 0, eof_line }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let l = self.lines.get(self.pos).copied();
        self.pos += 1;
        l
    }

    fn eof(&self, expected: &str) -> ParseError {
        err(self.eof_line, 1, format!("unexpected end of input, expected {expected}"))
    }

    fn expect_header(&mut self, header: &str) -> Result<(), ParseError> {
        match self.next() {
            Some((_, l)) if l.trim() == header => Ok(()),
            Some((n, l)) => Err(ParseError {
                line: n,
                column: indent(l) + 1,
                message: format!("expected `{header}`"),
                token: Some(l.trim().to_string()),
            }),
            None => Err(self.eof(&format!("`{header}`"))),
        }
    }

    fn expect_end(&mut self) -> Result<(), ParseError> {
        if let Some((n, l)) = self.next() {
            return Err(ParseError {
                line: n,
                column: indent(l) + 1,
                message: "unexpected content after the block".into(),
                token: Some(l.trim().to_string()),
            });
        }
        Ok(())
    }
}

fn indent(l: &str) -> usize {
    l.len() - l.trim_start().len()
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':')
}

fn is_category_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-')
}

/// Splits `a, b, c` starting at byte `offset` of line `n`.
fn id_list(n: usize, line: &str, offset: usize, allow_empty: bool) -> Result<Vec<String>, ParseError> {
    let body = &line[offset..];
    if body.trim().is_empty() {
        return if allow_empty { Ok(Vec::new()) } else { Err(err(n, offset + 1, "expected at least one identifier")) };
    }
    let mut out = Vec::new();
    let mut start = offset;
    for part in body.split(',') {
        let col = start + indent(part) + 1;
        let tok = part.trim();
        if tok.is_empty() || !tok.chars().all(is_ident_char) {
            return Err(ParseError {
                line: n,
                column: col,
                message: format!("invalid identifier `{tok}`"),
                token: Some(tok.into()),
            });
        }
        out.push(tok.to_string());
        start += part.len() + 1;
    }
    Ok(out)
}

pub fn parse_stage_output(raw: &str, stage: Stage) -> Result<StagePayload, ParseError> {
    match stage {
        Stage::Categorize => parse_groups(raw),
        Stage::Intergroup | Stage::Intragroup | Stage::Replan => parse_steps(raw),
        Stage::SummarizeAdjustment => parse_summary(raw),
        Stage::Profile => parse_profile(raw),
    }
}

fn parse_groups(raw: &str) -> Result<StagePayload, ParseError> {
    let mut lines = Lines::new(raw);
    lines.expect_header("GROUPS")?;
    let mut groups = Vec::new();
    loop {
        let Some((n, l)) = lines.next() else {
            return Err(lines.eof("`END`"));
        };
        if l.trim() == "END" {
            break;
        }
        let Some(colon) = l.find(':') else {
            return Err(err(n, l.len() + 1, "expected `category: id, id`"));
        };
        let cat = l[..colon].trim();
        if cat.is_empty() || !cat.chars().all(is_category_char) {
            return Err(ParseError {
                line: n,
                column: indent(l) + 1,
                message: format!("invalid category `{cat}`"),
                token: Some(cat.into()),
            });
        }
        groups.push((cat.to_string(), id_list(n, l, colon + 1, false)?));
    }
    lines.expect_end()?;
    Ok(StagePayload::Groups(groups))
}

/// Parses one `prim(arg, arg) -> kind` line.
pub fn parse_step_line(n: usize, l: &str) -> Result<ActionStep, ParseError> {
    let base = indent(l);
    let s = l.trim();
    let Some(open) = s.find('(') else {
        return Err(err(n, base + s.len() + 1, "expected `(`"));
    };
    let name = s[..open].trim();
    let primitive = Primitive::parse(name).ok_or_else(|| ParseError {
        line: n,
        column: base + 1,
        message: format!("unknown primitive `{name}`"),
        token: Some(name.into()),
    })?;
    let Some(close) = s.find(')') else {
        return Err(err(n, base + s.len() + 1, "expected `)`"));
    };
    if close < open {
        return Err(err(n, base + close + 1, "unbalanced parentheses"));
    }
    let args = id_list(n, &l[..base + close], base + open + 1, true)?;
    if args.len() != primitive.arity() {
        return Err(err(
            n,
            base + open + 1,
            format!("{primitive} takes {} argument(s), got {}", primitive.arity(), args.len()),
        ));
    }
    let rest = s[close + 1..].trim();
    let mut step = ActionStep { primitive, args, relation: None };
    if !rest.is_empty() {
        let col = base + s.len() - rest.len() + 1;
        let Some(kind_s) = rest.strip_prefix("->") else {
            return Err(ParseError {
                line: n,
                column: col,
                message: "expected `->` or end of line".into(),
                token: Some(rest.into()),
            });
        };
        let kind_s = kind_s.trim();
        let kind = RelationKind::parse(kind_s).ok_or_else(|| ParseError {
            line: n,
            column: col,
            message: format!("unknown relation `{kind_s}`"),
            token: Some(kind_s.into()),
        })?;
        if !primitive.accepts(kind) {
            return Err(err(n, col, format!("{primitive} cannot produce a `{kind}` relation")));
        }
        step.relation = Some(kind);
    }
    Ok(step)
}

fn parse_steps(raw: &str) -> Result<StagePayload, ParseError> {
    let mut lines = Lines::new(raw);
    lines.expect_header("STEPS")?;
    let mut steps = Vec::new();
    loop {
        let Some((n, l)) = lines.next() else {
            return Err(lines.eof("`END`"));
        };
        if l.trim() == "END" {
            break;
        }
        steps.push(parse_step_line(n, l)?);
    }
    lines.expect_end()?;
    Ok(StagePayload::Steps(steps))
}

fn parse_summary(raw: &str) -> Result<StagePayload, ParseError> {
    let mut lines = Lines::new(raw);
    let (n, l) = lines.next().ok_or_else(|| lines.eof("`PREFERENCE:`"))?;
    let Some(text) = l.trim_start().strip_prefix("PREFERENCE:") else {
        return Err(err(n, indent(l) + 1, "expected `PREFERENCE:`"));
    };
    let text = text.trim();
    if text.is_empty() {
        return Err(err(n, l.len() + 1, "empty preference text"));
    }
    let (n2, l2) = lines.next().ok_or_else(|| lines.eof("`TAGS:`"))?;
    let Some(pos) = l2.find("TAGS:") else {
        return Err(err(n2, indent(l2) + 1, "expected `TAGS:`"));
    };
    let tags = id_list(n2, l2, pos + 5, true)?;
    lines.expect_end()?;
    Ok(StagePayload::Summary { text: text.to_string(), tags })
}

fn parse_profile(raw: &str) -> Result<StagePayload, ParseError> {
    let mut lines = Lines::new(raw);
    lines.expect_header("PROFILES")?;
    let mut items = Vec::new();
    loop {
        let Some((n, l)) = lines.next() else {
            return Err(lines.eof("`END`"));
        };
        if l.trim() == "END" {
            break;
        }
        let Some(colon) = l.find(':') else {
            return Err(err(n, l.len() + 1, "expected `id, id: text`"));
        };
        let parents = id_list(n, &l[..colon], 0, false)?;
        let text = l[colon + 1..].trim();
        if text.is_empty() {
            return Err(err(n, colon + 2, "empty profile text"));
        }
        items.push(ProfileItem { parents, text: text.to_string() });
    }
    lines.expect_end()?;
    Ok(StagePayload::Profile(items))
}
