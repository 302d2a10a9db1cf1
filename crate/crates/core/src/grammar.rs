//! The structured reasoning-trajectory format.
//!
//! A trajectory is a `<think>…</think>` block followed by an `<answer>…</answer>`
//! block. Either block interleaves free text with object mentions. The first
//! mention of an object carries its full grounding:
//!
//! ```text
//! <bbox_id>[N-M]</bbox_id><|object_ref_start|>red cup<|object_ref_end|><|box_start|>(10,20),(30,40)<|box_end|>
//! ```
//!
//! and later mentions repeat only `<bbox_id>[N-M]</bbox_id>`.
//!
//! Free text and descriptions may not contain any reserved token. Whitespace
//! around the two blocks is ignored; whitespace inside them is kept verbatim.
//! Coordinates are plain decimals (`12`, `12.5`) and are rendered in the
//! shortest form that reads back to the same value.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::ops::Range;

use thiserror::Error;

use crate::types::{BoundingBox, GroundedObject, PositionId};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const BBOX_ID_OPEN: &str = "<bbox_id>";
pub const BBOX_ID_CLOSE: &str = "</bbox_id>";
pub const OBJECT_REF_START: &str = "<|object_ref_start|>";
pub const OBJECT_REF_END: &str = "<|object_ref_end|>";
pub const BOX_START: &str = "<|box_start|>";
pub const BOX_END: &str = "<|box_end|>";

const ENVELOPE_TOKENS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
const MENTION_TOKENS: [&str; 6] = [
    BBOX_ID_OPEN,
    BBOX_ID_CLOSE,
    OBJECT_REF_START,
    OBJECT_REF_END,
    BOX_START,
    BOX_END,
];

/// Every reserved token starts with `<` and contains no other `<`, so a scan
/// over `<` positions finds all occurrences.
fn find_token<'a>(text: &str, tokens: &[&'a str]) -> Option<(usize, &'a str)> {
    text.match_indices('<').find_map(|(i, _)| {
        let rest = &text[i..];
        tokens.iter().find(|t| rest.starts_with(**t)).map(|t| (i, *t))
    })
}

/// Returns the first reserved token found in `text`, if any.
pub fn find_reserved(text: &str) -> Option<(usize, &'static str)> {
    find_token(text, &ENVELOPE_TOKENS).into_iter().chain(find_token(text, &MENTION_TOKENS)).min_by_key(|(i, _)| *i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParseErrorKind {
    MissingEnvelope,
    MalformedMention,
    BadCoordinates,
    DanglingReference,
    DuplicateId,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ParseErrorKind::MissingEnvelope => "MissingEnvelope",
            ParseErrorKind::MalformedMention => "MalformedMention",
            ParseErrorKind::BadCoordinates => "BadCoordinates",
            ParseErrorKind::DanglingReference => "DanglingReference",
            ParseErrorKind::DuplicateId => "DuplicateId",
        };
        f.write_str(name)
    }
}

/// Parse failure with the byte offset in the original input where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
}

impl ParseError {
    fn new(kind: ParseErrorKind, offset: usize) -> Self {
        Self { kind, offset }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantViolation {
    #[error("{0} has more than one full mention")]
    DuplicateId(PositionId),
    #[error("back-reference {0} has no earlier full mention")]
    DanglingReference(PositionId),
    #[error("free text contains reserved token {0:?}")]
    ReservedTokenInText(&'static str),
    #[error("description of {0} is empty or contains a reserved token")]
    BadDescription(PositionId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectMention {
    Full(GroundedObject),
    BackReference(PositionId),
}

impl ObjectMention {
    pub fn position(&self) -> PositionId {
        match self {
            ObjectMention::Full(obj) => obj.position,
            ObjectMention::BackReference(id) => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(String),
    Mention(ObjectMention),
}

/// Content of one block. Text segments are never empty and never adjacent,
/// which makes structural equality coincide with rendered equality.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Block {
    segments: Vec<Segment>,
}

impl Block {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_segments(segments: impl IntoIterator<Item = Segment>) -> Self {
        segments.into_iter().fold(Block::new(), |mut block, seg| {
            block.push(seg);
            block
        })
    }

    pub fn push(&mut self, segment: Segment) {
        match segment {
            Segment::Text(t) => self.push_text(&t),
            m @ Segment::Mention(_) => self.segments.push(m),
        }
    }

    pub fn push_text(&mut self, text: &str) {
        if text.is_empty() {
            return;
        }
        if let Some(Segment::Text(last)) = self.segments.last_mut() {
            last.push_str(text);
        } else {
            self.segments.push(Segment::Text(text.to_owned()));
        }
    }

    pub fn push_mention(&mut self, mention: ObjectMention) {
        self.segments.push(Segment::Mention(mention));
    }

    pub fn text(mut self, text: &str) -> Self {
        self.push_text(text);
        self
    }

    pub fn mention(mut self, mention: ObjectMention) -> Self {
        self.push_mention(mention);
        self
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn mentions(&self) -> impl Iterator<Item = &ObjectMention> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Mention(m) => Some(m),
            Segment::Text(_) => None,
        })
    }

    /// Block content as it appears between the envelope tags.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, &mut |_, _| {});
        out
    }

    fn render_into<'b>(&'b self, out: &mut String, on_mention: &mut dyn FnMut(&'b ObjectMention, Range<usize>)) {
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Mention(m) => {
                    let start = out.len();
                    render_mention(m, out);
                    on_mention(m, start..out.len());
                }
            }
        }
    }
}

fn render_mention(mention: &ObjectMention, out: &mut String) {
    let id = mention.position();
    let _ = write!(out, "{BBOX_ID_OPEN}{id}{BBOX_ID_CLOSE}");
    if let ObjectMention::Full(obj) = mention {
        let b = &obj.bbox;
        let _ = write!(
            out,
            "{OBJECT_REF_START}{}{OBJECT_REF_END}{BOX_START}({},{}),({},{}){BOX_END}",
            obj.description,
            b.x1(),
            b.y1(),
            b.x2(),
            b.y2()
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Think,
    Answer,
}

/// A mention located in the canonical rendering of its trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionSpan<'a> {
    pub block: BlockKind,
    pub mention: &'a ObjectMention,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub think: Block,
    pub answer: Block,
}

impl Trajectory {
    pub fn new(think: Block, answer: Block) -> Self {
        Self { think, answer }
    }

    pub fn think_text(&self) -> String {
        self.think.render()
    }

    pub fn answer_text(&self) -> String {
        self.answer.render()
    }

    /// All mentions in order, with byte spans into [`serialize_trajectory`]'s output.
    pub fn mentions(&self) -> Vec<MentionSpan<'_>> {
        let mut spans = Vec::new();
        let mut out = String::from(THINK_OPEN);
        self.think.render_into(&mut out, &mut |m, span| {
            spans.push(MentionSpan { block: BlockKind::Think, mention: m, span });
        });
        out.push_str(THINK_CLOSE);
        out.push_str(ANSWER_OPEN);
        self.answer.render_into(&mut out, &mut |m, span| {
            spans.push(MentionSpan { block: BlockKind::Answer, mention: m, span });
        });
        spans
    }

    pub fn full_mentions(&self) -> impl Iterator<Item = &GroundedObject> {
        self.think.mentions().chain(self.answer.mentions()).filter_map(|m| match m {
            ObjectMention::Full(obj) => Some(obj),
            ObjectMention::BackReference(_) => None,
        })
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let mut seen = HashSet::new();
        for block in [&self.think, &self.answer] {
            for seg in block.segments() {
                match seg {
                    Segment::Text(t) => {
                        if let Some((_, tok)) = find_reserved(t) {
                            return Err(InvariantViolation::ReservedTokenInText(tok));
                        }
                    }
                    Segment::Mention(ObjectMention::Full(obj)) => {
                        if obj.description.trim().is_empty() || find_reserved(&obj.description).is_some() {
                            return Err(InvariantViolation::BadDescription(obj.position));
                        }
                        if !seen.insert(obj.position) {
                            return Err(InvariantViolation::DuplicateId(obj.position));
                        }
                    }
                    Segment::Mention(ObjectMention::BackReference(id)) => {
                        if !seen.contains(id) {
                            return Err(InvariantViolation::DanglingReference(*id));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Renders `t` in canonical form. Fails if `t` would not parse back to itself.
pub fn serialize_trajectory(t: &Trajectory) -> Result<String, InvariantViolation> {
    t.validate()?;
    let mut out = String::from(THINK_OPEN);
    t.think.render_into(&mut out, &mut |_, _| {});
    out.push_str(THINK_CLOSE);
    out.push_str(ANSWER_OPEN);
    t.answer.render_into(&mut out, &mut |_, _| {});
    out.push_str(ANSWER_CLOSE);
    Ok(out)
}

/// True iff `text` is exactly one think block then one answer block with
/// well-formed, consistent mentions.
pub fn check_format(text: &str) -> bool {
    parse_trajectory(text).is_ok()
}

/// Answer-block groundings in textual order, back-references resolved to
/// the full mention they point at.
pub fn extract_groundings(t: &Trajectory) -> Vec<GroundedObject> {
    let by_id: HashMap<PositionId, &GroundedObject> = t.full_mentions().map(|o| (o.position, o)).collect();
    t.answer
        .mentions()
        .filter_map(|m| match m {
            ObjectMention::Full(obj) => Some(obj.clone()),
            ObjectMention::BackReference(id) => by_id.get(id).map(|o| (*o).clone()),
        })
        .collect()
}

pub fn parse_trajectory(input: &str) -> Result<Trajectory, ParseError> {
    use ParseErrorKind::*;

    let think_tag = skip_ws(input, 0);
    if !input[think_tag..].starts_with(THINK_OPEN) {
        return Err(ParseError::new(MissingEnvelope, think_tag));
    }
    let think_body = think_tag + THINK_OPEN.len();
    let think_end = find_from(input, think_body, THINK_CLOSE).ok_or(ParseError::new(MissingEnvelope, input.len()))?;
    reject_envelope_tokens(input, think_body..think_end)?;

    let answer_tag = skip_ws(input, think_end + THINK_CLOSE.len());
    if !input[answer_tag..].starts_with(ANSWER_OPEN) {
        return Err(ParseError::new(MissingEnvelope, answer_tag));
    }
    let answer_body = answer_tag + ANSWER_OPEN.len();
    let answer_end = find_from(input, answer_body, ANSWER_CLOSE).ok_or(ParseError::new(MissingEnvelope, input.len()))?;
    reject_envelope_tokens(input, answer_body..answer_end)?;

    let trailing = skip_ws(input, answer_end + ANSWER_CLOSE.len());
    if trailing != input.len() {
        return Err(ParseError::new(MissingEnvelope, trailing));
    }

    let mut seen = HashSet::new();
    let think = BlockParser::new(input, think_body..think_end, &mut seen).parse()?;
    let answer = BlockParser::new(input, answer_body..answer_end, &mut seen).parse()?;
    Ok(Trajectory { think, answer })
}

fn skip_ws(input: &str, from: usize) -> usize {
    let rest = &input[from..];
    from + (rest.len() - rest.trim_start().len())
}

fn find_from(input: &str, from: usize, needle: &str) -> Option<usize> {
    input[from..].find(needle).map(|i| from + i)
}

fn reject_envelope_tokens(input: &str, body: Range<usize>) -> Result<(), ParseError> {
    match find_token(&input[body.clone()], &ENVELOPE_TOKENS) {
        Some((i, _)) => Err(ParseError::new(ParseErrorKind::MissingEnvelope, body.start + i)),
        None => Ok(()),
    }
}

/// Cursor over one block body. Offsets are absolute within the full input.
struct BlockParser<'a, 's> {
    input: &'a str,
    pos: usize,
    end: usize,
    seen: &'s mut HashSet<PositionId>,
}

impl<'a, 's> BlockParser<'a, 's> {
    fn new(input: &'a str, body: Range<usize>, seen: &'s mut HashSet<PositionId>) -> Self {
        Self {
            input,
            pos: body.start,
            end: body.end,
            seen,
        }
    }

    fn rest(&self) -> &'a str {
        &self.input[self.pos..self.end]
    }

    fn error(&self, kind: ParseErrorKind) -> ParseError {
        ParseError::new(kind, self.pos)
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), ParseError> {
        if self.eat(token) {
            Ok(())
        } else {
            Err(self.error(ParseErrorKind::MalformedMention))
        }
    }

    fn parse(mut self) -> Result<Block, ParseError> {
        let mut block = Block::new();
        loop {
            match find_token(self.rest(), &MENTION_TOKENS) {
                None => {
                    block.push_text(self.rest());
                    return Ok(block);
                }
                Some((i, token)) => {
                    block.push_text(&self.rest()[..i]);
                    self.pos += i;
                    if token != BBOX_ID_OPEN {
                        return Err(self.error(ParseErrorKind::MalformedMention));
                    }
                    let mention = self.mention()?;
                    block.push_mention(mention);
                }
            }
        }
    }

    fn mention(&mut self) -> Result<ObjectMention, ParseError> {
        let mention_start = self.pos;
        self.expect(BBOX_ID_OPEN)?;
        self.expect("[")?;
        let image = self.index()?;
        self.expect("-")?;
        let object = self.index()?;
        self.expect("]")?;
        self.expect(BBOX_ID_CLOSE)?;
        let id = PositionId::new(image, object).map_err(|_| ParseError::new(ParseErrorKind::MalformedMention, mention_start))?;

        if !self.eat(OBJECT_REF_START) {
            if !self.seen.contains(&id) {
                return Err(ParseError::new(ParseErrorKind::DanglingReference, mention_start));
            }
            return Ok(ObjectMention::BackReference(id));
        }

        let desc_end = self
            .rest()
            .find(OBJECT_REF_END)
            .ok_or_else(|| self.error(ParseErrorKind::MalformedMention))?;
        let description = &self.rest()[..desc_end];
        if let Some((i, _)) = find_token(description, &MENTION_TOKENS) {
            return Err(ParseError::new(ParseErrorKind::MalformedMention, self.pos + i));
        }
        if description.trim().is_empty() {
            return Err(self.error(ParseErrorKind::MalformedMention));
        }
        self.pos += desc_end + OBJECT_REF_END.len();

        self.expect(BOX_START)?;
        let box_start = self.pos;
        self.expect("(")?;
        let x1 = self.number()?;
        self.expect(",")?;
        let y1 = self.number()?;
        self.expect("),(")?;
        let x2 = self.number()?;
        self.expect(",")?;
        let y2 = self.number()?;
        self.expect(")")?;
        self.expect(BOX_END)?;
        let bbox = BoundingBox::new(x1, y1, x2, y2).map_err(|_| ParseError::new(ParseErrorKind::BadCoordinates, box_start))?;

        if !self.seen.insert(id) {
            return Err(ParseError::new(ParseErrorKind::DuplicateId, mention_start));
        }
        let obj = GroundedObject::new(id, description, bbox).map_err(|_| ParseError::new(ParseErrorKind::MalformedMention, mention_start))?;
        Ok(ObjectMention::Full(obj))
    }

    fn index(&mut self) -> Result<u32, ParseError> {
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        let value = self.rest()[..digits]
            .parse::<u32>()
            .map_err(|_| self.error(ParseErrorKind::MalformedMention))?;
        self.pos += digits;
        Ok(value)
    }

    /// `digits ('.' digits)?`; anything else inside the box is a coordinate error.
    fn number(&mut self) -> Result<f64, ParseError> {
        let rest = self.rest().as_bytes();
        let len = rest
            .iter()
            .take_while(|b| b.is_ascii_digit() || **b == b'.' || b.is_ascii_alphabetic() || **b == b'-' || **b == b'+')
            .count();
        let lexeme = &self.rest()[..len];
        let well_formed = match lexeme.split_once('.') {
            None => is_digits(lexeme),
            Some((int, frac)) => is_digits(int) && is_digits(frac),
        };
        if !well_formed {
            return Err(self.error(ParseErrorKind::BadCoordinates));
        }
        let value: f64 = lexeme.parse().map_err(|_| self.error(ParseErrorKind::BadCoordinates))?;
        if !value.is_finite() {
            return Err(self.error(ParseErrorKind::BadCoordinates));
        }
        self.pos += len;
        Ok(value)
    }
}

fn is_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAGE3: &str = "<think>I see <bbox_id>[1-1]</bbox_id><|object_ref_start|>red cup<|object_ref_end|><|box_start|>(10,20),(30,40)<|box_end|></think><answer><bbox_id>[1-1]</bbox_id></answer>";

    fn obj(n: u32, k: u32, desc: &str, b: [f64; 4]) -> GroundedObject {
        GroundedObject::new(
            PositionId::new(n, k).unwrap(),
            desc,
            BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        )
        .unwrap()
    }

    fn kind(text: &str) -> ParseErrorKind {
        parse_trajectory(text).unwrap_err().kind
    }

    #[test]
    fn parses_stage3_example() {
        let t = parse_trajectory(STAGE3).unwrap();
        let red_cup = obj(1, 1, "red cup", [10.0, 20.0, 30.0, 40.0]);
        let expected = Trajectory::new(
            Block::new().text("I see ").mention(ObjectMention::Full(red_cup)),
            Block::new().mention(ObjectMention::BackReference(PositionId::new(1, 1).unwrap())),
        );
        assert_eq!(t, expected);
        assert_eq!(serialize_trajectory(&t).unwrap(), STAGE3);
        assert!(check_format(STAGE3));
    }

    #[test]
    fn mention_free_envelope() {
        let t = parse_trajectory("<think>t</think><answer>a</answer>").unwrap();
        assert!(t.mentions().is_empty());
        assert_eq!(t.think_text(), "t");
        assert_eq!(t.answer_text(), "a");
    }

    #[test]
    fn envelope_errors() {
        assert_eq!(kind("<think>x</think>"), ParseErrorKind::MissingEnvelope);
        assert_eq!(kind(""), ParseErrorKind::MissingEnvelope);
        assert_eq!(kind("<answer>a</answer><think>t</think>"), ParseErrorKind::MissingEnvelope);
        assert_eq!(kind("<think>t</think><answer>a</answer><answer>b</answer>"), ParseErrorKind::MissingEnvelope);
        assert_eq!(kind("<think>t<answer></think><answer>a</answer>"), ParseErrorKind::MissingEnvelope);
        assert_eq!(kind("x<think>t</think><answer>a</answer>"), ParseErrorKind::MissingEnvelope);
        assert!(!check_format("<answer>a</answer><think>t</think>"));
        assert!(!check_format("<think>t</think><answer>a</answer><answer>b</answer>"));
    }

    #[test]
    fn outer_whitespace_is_ignored_inner_is_kept() {
        let t = parse_trajectory("\n  <think> a \n</think>\n<answer>\tb</answer>\n\n").unwrap();
        assert_eq!(t.think_text(), " a \n");
        assert_eq!(t.answer_text(), "\tb");
        assert_eq!(serialize_trajectory(&t).unwrap(), "<think> a \n</think><answer>\tb</answer>");
    }

    #[test]
    fn malformed_mentions() {
        let cases = [
            "<think><bbox_id>[1-1]</think><answer>a</answer>",
            "<think><bbox_id>[1-1]</bbox_id><|object_ref_start|>cup<|object_ref_end|></think><answer>a</answer>",
            "<think><bbox_id>[1-1]</bbox_id><|object_ref_start|>cup<|box_start|>(1,1),(2,2)<|box_end|></think><answer>a</answer>",
            "<think><bbox_id>[1-1]</bbox_id><|object_ref_start|>cup<|object_ref_end|><|box_start|>(1,1)(2,2)<|box_end|></think><answer>a</answer>",
            "<think><bbox_id>[0-1]</bbox_id></think><answer>a</answer>",
            "<think><bbox_id>[1 1]</bbox_id></think><answer>a</answer>",
            "<think><bbox_id>[99999999999-1]</bbox_id></think><answer>a</answer>",
            "<think>stray <|box_end|></think><answer>a</answer>",
            "<think>t</think><answer></bbox_id></answer>",
            "<think><bbox_id>[1-1]</bbox_id><|object_ref_start|>  <|object_ref_end|><|box_start|>(1,1),(2,2)<|box_end|></think><answer>a</answer>",
        ];
        for c in cases {
            assert_eq!(kind(c), ParseErrorKind::MalformedMention, "{c}");
        }
    }

    #[test]
    fn malformed_offset_points_at_problem() {
        let text = "<think>ok <|box_end|></think><answer>a</answer>";
        let err = parse_trajectory(text).unwrap_err();
        assert_eq!(err.offset, text.find("<|box_end|>").unwrap());
    }

    #[test]
    fn coordinate_errors() {
        let mk = |coords: &str| {
            format!("<think><bbox_id>[1-1]</bbox_id><|object_ref_start|>cup<|object_ref_end|><|box_start|>{coords}<|box_end|></think><answer>a</answer>")
        };
        for c in ["(a,1),(2,2)", "(1,1),(0,2)", "(1,3),(2,2)", "(-1,1),(2,2)", "(1e3,1),(2,2)", "(1.,1),(2,2)", "(.5,1),(2,2)", "(,1),(2,2)"] {
            assert_eq!(kind(&mk(c)), ParseErrorKind::BadCoordinates, "{c}");
        }
        let huge = "9".repeat(400);
        assert_eq!(kind(&mk(&format!("(1,1),({huge},2)"))), ParseErrorKind::BadCoordinates);
        let t = parse_trajectory(&mk("(1.50,0.25),(2,2.0)")).unwrap();
        assert!(serialize_trajectory(&t).unwrap().contains("(1.5,0.25),(2,2)"));
    }

    #[test]
    fn degenerate_box_parses() {
        let text = "<think>t</think><answer><bbox_id>[1-1]</bbox_id><|object_ref_start|>dot<|object_ref_end|><|box_start|>(5,5),(5,9)<|box_end|></answer>";
        assert!(check_format(text));
    }

    #[test]
    fn dangling_and_duplicate_ids() {
        assert_eq!(kind("<think>t</think><answer><bbox_id>[2-1]</bbox_id></answer>"), ParseErrorKind::DanglingReference);
        let full = "<bbox_id>[1-1]</bbox_id><|object_ref_start|>cup<|object_ref_end|><|box_start|>(1,1),(2,2)<|box_end|>";
        assert_eq!(kind(&format!("<think>{full}</think><answer>{full}</answer>")), ParseErrorKind::DuplicateId);
        // answer may introduce new full mentions
        assert!(check_format(&format!("<think>t</think><answer>{full}</answer>")));
        // a reference before its definition does not resolve
        assert_eq!(
            kind(&format!("<think><bbox_id>[1-1]</bbox_id> then {full}</think><answer>a</answer>")),
            ParseErrorKind::DanglingReference
        );
    }

    #[test]
    fn serialize_rejects_invalid() {
        let only_ref = Trajectory::new(Block::new(), Block::new().mention(ObjectMention::BackReference(PositionId::new(1, 1).unwrap())));
        assert!(matches!(serialize_trajectory(&only_ref), Err(InvariantViolation::DanglingReference(_))));

        let cup = obj(1, 1, "cup", [0.0, 0.0, 1.0, 1.0]);
        let dup = Trajectory::new(
            Block::new().mention(ObjectMention::Full(cup.clone())),
            Block::new().mention(ObjectMention::Full(cup)),
        );
        assert!(matches!(serialize_trajectory(&dup), Err(InvariantViolation::DuplicateId(_))));

        let bad_text = Trajectory::new(Block::new().text("a </think> b"), Block::new());
        assert!(matches!(serialize_trajectory(&bad_text), Err(InvariantViolation::ReservedTokenInText(_))));
    }

    #[test]
    fn serialize_orders_mentions() {
        let t = Trajectory::new(
            Block::new()
                .mention(ObjectMention::Full(obj(1, 1, "a", [0.0, 0.0, 1.0, 1.0])))
                .text(" and ")
                .mention(ObjectMention::Full(obj(2, 1, "b", [1.0, 1.0, 2.0, 2.0]))),
            Block::new().text("done"),
        );
        let s = serialize_trajectory(&t).unwrap();
        assert!(s.find("[1-1]").unwrap() < s.find("[2-1]").unwrap());
        assert_eq!(parse_trajectory(&s).unwrap(), t);
    }

    #[test]
    fn mention_spans_index_canonical_text() {
        let t = parse_trajectory(STAGE3).unwrap();
        let canonical = serialize_trajectory(&t).unwrap();
        let spans = t.mentions();
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].block, BlockKind::Think);
        assert!(canonical[spans[0].span.clone()].starts_with("<bbox_id>[1-1]"));
        assert!(canonical[spans[0].span.clone()].ends_with("<|box_end|>"));
        assert_eq!(&canonical[spans[1].span.clone()], "<bbox_id>[1-1]</bbox_id>");
        assert_eq!(spans[1].block, BlockKind::Answer);
    }

    #[test]
    fn extract_resolves_back_references() {
        let t = parse_trajectory(STAGE3).unwrap();
        assert_eq!(extract_groundings(&t), vec![obj(1, 1, "red cup", [10.0, 20.0, 30.0, 40.0])]);
        let empty = parse_trajectory("<think>t</think><answer>a</answer>").unwrap();
        assert!(extract_groundings(&empty).is_empty());
    }

    #[test]
    fn extract_keeps_answer_order() {
        let a = obj(2, 1, "a", [0.0, 0.0, 1.0, 1.0]);
        let b = obj(1, 3, "b", [1.0, 1.0, 2.0, 2.0]);
        let t = Trajectory::new(
            Block::new().text("think"),
            Block::new().mention(ObjectMention::Full(a.clone())).text(" ").mention(ObjectMention::Full(b.clone())),
        );
        let parsed = parse_trajectory(&serialize_trajectory(&t).unwrap()).unwrap();
        assert_eq!(extract_groundings(&parsed), vec![a, b]);
    }

    #[test]
    fn description_may_hold_plain_angle_brackets() {
        let text = "<think>1 < 2 > 0</think><answer><bbox_id>[1-1]</bbox_id><|object_ref_start|>a <b> c<|object_ref_end|><|box_start|>(1,1),(2,2)<|box_end|></answer>";
        let t = parse_trajectory(text).unwrap();
        assert_eq!(extract_groundings(&t)[0].description, "a <b> c");
        assert_eq!(serialize_trajectory(&t).unwrap(), text);
    }
}
