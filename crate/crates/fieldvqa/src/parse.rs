//! Value recovery from raw model output and the deterministic matching
//! rules used to grade predictions against gold values.
//!
//! Matching is intentionally mechanical: exact equality, then (for numeric
//! kinds) separator-free digit-string equality, then normalized-string
//! equality. A zero-group relaxation lets `2.00` match `2.000` (trailing
//! zero groups differ only in width) without ever letting `48` match
//! `48.000`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{FieldKind, FieldSpec, NumericProfile};

/// Version tag for the normalization/matching rules; archived with every run
/// so replays can detect grading-rule drift.
pub const RULES_VERSION: &str = "match-rules/1";

/// Where in the raw response a value was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    JsonBlock,
    KeyValueLine,
    ProseTail,
    /// Value normalized directly, not extracted from a response.
    Direct,
}

/// A value recovered from model output, with its canonical comparison forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedValue {
    /// Substring extracted from the model output, verbatim.
    pub raw: String,
    /// Canonical comparison form; a fixed point of normalization.
    pub normalized: String,
    /// Sign plus digit string with grouping separators removed (numeric
    /// kind only); absent when the value holds no clean number.
    pub numeric_digits: Option<String>,
    pub source: ValueSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchReason {
    Exact,
    NormalizedEqual,
    DigitsEqual,
    Mismatch,
    Unparseable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub matched: bool,
    pub reason: MatchReason,
}

impl MatchVerdict {
    fn hit(reason: MatchReason) -> Self {
        MatchVerdict {
            matched: true,
            reason,
        }
    }

    fn miss(reason: MatchReason) -> Self {
        MatchVerdict {
            matched: false,
            reason,
        }
    }

    pub fn unparseable() -> Self {
        MatchVerdict::miss(MatchReason::Unparseable)
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

const OUTER_PUNCT: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '`', '(', ')', '[', ']', '{', '}', '<', '>',
];

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize_text(value: &str) -> String {
    let collapsed = collapse_whitespace(value);
    collapsed
        .trim_matches(|c: char| c.is_whitespace() || OUTER_PUNCT.contains(&c))
        .to_lowercase()
}

/// Strips currency symbols/codes and unit noise from the ends of a numeric
/// value, then removes trailing separator runs (`"43.636."` -> `"43.636"`,
/// `"1.000,-"` -> `"1.000"`).
fn strip_numeric_noise(value: &str) -> String {
    let collapsed = collapse_whitespace(value);
    let mut s = collapsed.as_str();
    loop {
        let before = s;
        s = s.trim_start_matches(|c: char| {
            c.is_whitespace() || c.is_alphabetic() || is_currency_symbol(c) || c == '*'
        });
        s = s.trim_end_matches(|c: char| {
            c.is_whitespace() || c.is_alphabetic() || is_currency_symbol(c) || c == '%' || c == '*'
        });
        // Zero-cents suffix `,-` / `.-`.
        if let Some(stripped) = s.strip_suffix('-') {
            if stripped.ends_with(['.', ',']) {
                s = stripped;
            }
        }
        s = s.trim_end_matches(['.', ',']);
        if s == before {
            break;
        }
    }
    s.to_string()
}

fn is_currency_symbol(c: char) -> bool {
    matches!(c, '$' | '€' | '£' | '¥' | '₩' | '¢' | '₹')
}

/// Sign plus concatenated digits when the cleaned value is one number with
/// optional `.`/`,`/space group separators; leading zeros are dropped.
fn numeric_digit_string(cleaned: &str) -> Option<String> {
    let mut chars = cleaned.chars().peekable();
    let mut sign = "";
    if let Some(&c) = chars.peek() {
        if c == '-' || c == '+' {
            if c == '-' {
                sign = "-";
            }
            chars.next();
        }
    }
    let mut digits = String::new();
    let mut seen_digit = false;
    for c in chars {
        match c {
            '0'..='9' => {
                digits.push(c);
                seen_digit = true;
            }
            '.' | ',' | ' ' if seen_digit => {}
            _ => return None,
        }
    }
    if !seen_digit {
        return None;
    }
    let trimmed = digits.trim_start_matches('0');
    let digits = if trimmed.is_empty() { "0" } else { trimmed };
    Some(format!("{sign}{digits}"))
}

/// Separator-delimited digit groups of a cleaned numeric value, used by the
/// zero-group relaxation (`2.00` vs `2.000`).
fn digit_groups(cleaned: &str) -> Option<(bool, Vec<String>)> {
    let body = cleaned.strip_prefix(['-', '+']).unwrap_or(cleaned);
    let negative = cleaned.starts_with('-');
    let mut groups = vec![String::new()];
    for c in body.chars() {
        match c {
            '0'..='9' => groups.last_mut().unwrap().push(c),
            '.' | ',' | ' ' => {
                if groups.last().unwrap().is_empty() {
                    return None;
                }
                groups.push(String::new());
            }
            _ => return None,
        }
    }
    if groups.iter().any(|g| g.is_empty()) {
        return None;
    }
    Some((negative, groups))
}

fn zero_group_equal(a: &str, b: &str) -> bool {
    match (digit_groups(a), digit_groups(b)) {
        (Some((sa, ga)), Some((sb, gb))) => {
            sa == sb
                && ga.len() == gb.len()
                && ga.iter().zip(&gb).all(|(x, y)| {
                    x == y || (x.chars().all(|c| c == '0') && y.chars().all(|c| c == '0'))
                })
        }
        _ => false,
    }
}

fn normalize_date(value: &str) -> String {
    let collapsed = collapse_whitespace(value);
    let trimmed = collapsed.trim_matches(|c: char| c.is_whitespace() || OUTER_PUNCT.contains(&c));
    let parts: Vec<&str> = trimmed
        .split(['-', '/', '.', ' '])
        .filter(|p| !p.is_empty())
        .collect();
    if parts.len() == 3 && parts.iter().all(|p| p.chars().all(|c| c.is_ascii_digit())) {
        let nums: Vec<u32> = parts.iter().map(|p| p.parse().unwrap_or(0)).collect();
        // Four-digit year first: already year-month-day.
        if parts[0].len() == 4 {
            return format!("{}-{:02}-{:02}", parts[0], nums[1], nums[2]);
        }
        if parts[2].len() == 4 || parts[2].len() == 2 {
            let (a, b) = (nums[0], nums[1]);
            // Only canonicalize when one day/month reading is impossible.
            if a > 12 && b <= 12 {
                return format!("{}-{:02}-{:02}", parts[2], b, a);
            }
            if b > 12 && a <= 12 {
                return format!("{}-{:02}-{:02}", parts[2], a, b);
            }
        }
    }
    trimmed.to_lowercase()
}

/// Canonicalizes a value for comparison according to its field kind.
///
/// Text values are case-folded, whitespace-collapsed and stripped of outer
/// punctuation. Numeric values lose currency noise and trailing separator
/// runs, and expose a separator-free digit string. Date values canonicalize
/// to `Y-M-D` when the ordering is unambiguous.
pub fn normalize(value: &str, kind: FieldKind, profile: NumericProfile) -> ParsedValue {
    // Both separator profiles drop `.` and `,` when forming the digit
    // string; the profile is kept in the signature because callers track it
    // per dataset and future rules may diverge.
    let _ = profile;
    match kind {
        FieldKind::Text => ParsedValue {
            raw: value.to_string(),
            normalized: normalize_text(value),
            numeric_digits: None,
            source: ValueSource::Direct,
        },
        FieldKind::Date => ParsedValue {
            raw: value.to_string(),
            normalized: normalize_date(value),
            numeric_digits: None,
            source: ValueSource::Direct,
        },
        FieldKind::Numeric => {
            let cleaned = strip_numeric_noise(value);
            ParsedValue {
                raw: value.to_string(),
                normalized: cleaned.to_lowercase(),
                numeric_digits: numeric_digit_string(&cleaned),
                source: ValueSource::Direct,
            }
        }
    }
}

/// Decides whether a predicted value matches the gold value. Symmetric in
/// its two value arguments.
pub fn values_match(
    pred: &str,
    gold: &str,
    kind: FieldKind,
    profile: NumericProfile,
) -> MatchVerdict {
    if pred == gold {
        return MatchVerdict::hit(MatchReason::Exact);
    }
    let p = normalize(pred, kind, profile);
    let g = normalize(gold, kind, profile);
    if kind == FieldKind::Numeric {
        if let (Some(pd), Some(gd)) = (&p.numeric_digits, &g.numeric_digits) {
            if pd == gd {
                return MatchVerdict::hit(MatchReason::DigitsEqual);
            }
        }
        if zero_group_equal(&p.normalized, &g.normalized) {
            return MatchVerdict::hit(MatchReason::DigitsEqual);
        }
    }
    if !p.normalized.is_empty() && p.normalized == g.normalized {
        return MatchVerdict::hit(MatchReason::NormalizedEqual);
    }
    if kind == FieldKind::Numeric && (p.numeric_digits.is_none() || g.numeric_digits.is_none()) {
        return MatchVerdict::miss(MatchReason::Unparseable);
    }
    MatchVerdict::miss(MatchReason::Mismatch)
}

// ---------------------------------------------------------------------------
// Tolerant key->value block scanning
// ---------------------------------------------------------------------------
//
// Model outputs mix valid JSON with loose near-JSON such as
// `{"subtotal_price": 1,346,000, "tax_price": 144,695}` where bare numbers
// contain commas. The scanner treats a comma as a value terminator only when
// what follows looks like another key.

fn find_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if depth > 0 && in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            '}' => {
                if depth > 0 {
                    depth -= 1;
                    if depth == 0 {
                        blocks.push(&text[start..=i]);
                    }
                }
            }
            '"' if depth > 0 => in_string = true,
            _ => {}
        }
    }
    blocks
}

/// Parses `{key: value, ...}` pairs out of one block, tolerating unquoted
/// values with embedded commas.
fn parse_block(block: &str) -> Vec<(String, String)> {
    let inner = block
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .unwrap_or(block);
    let chars: Vec<char> = inner.chars().collect();
    let mut pairs = Vec::new();
    let mut i = 0usize;
    while i < chars.len() {
        while i < chars.len() && (chars[i].is_whitespace() || chars[i] == ',') {
            i += 1;
        }
        if i >= chars.len() {
            break;
        }
        let key = match read_key(&chars, &mut i) {
            Some(k) => k,
            None => break,
        };
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i >= chars.len() || chars[i] != ':' {
            break;
        }
        i += 1;
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        let value = read_value(&chars, &mut i);
        pairs.push((key, value));
    }
    pairs
}

fn read_key(chars: &[char], i: &mut usize) -> Option<String> {
    if chars.get(*i) == Some(&'"') {
        read_quoted(chars, i)
    } else {
        let start = *i;
        while *i < chars.len()
            && (chars[*i].is_alphanumeric() || matches!(chars[*i], '_' | '-' | ' '))
        {
            *i += 1;
        }
        let key: String = chars[start..*i].iter().collect();
        let key = key.trim().to_string();
        if key.is_empty() || key.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            None
        } else {
            Some(key)
        }
    }
}

fn read_quoted(chars: &[char], i: &mut usize) -> Option<String> {
    debug_assert_eq!(chars.get(*i), Some(&'"'));
    *i += 1;
    let mut out = String::new();
    while *i < chars.len() {
        match chars[*i] {
            '\\' if *i + 1 < chars.len() => {
                let next = chars[*i + 1];
                match next {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    'u' => {
                        let hex: String = chars.iter().skip(*i + 2).take(4).collect();
                        match u32::from_str_radix(&hex, 16).ok().and_then(char::from_u32) {
                            Some(c) if hex.len() == 4 => {
                                out.push(c);
                                *i += 4;
                            }
                            _ => out.push('u'),
                        }
                    }
                    other => out.push(other),
                }
                *i += 2;
            }
            '"' => {
                *i += 1;
                return Some(out);
            }
            c => {
                out.push(c);
                *i += 1;
            }
        }
    }
    None
}

fn read_value(chars: &[char], i: &mut usize) -> String {
    match chars.get(*i) {
        Some('"') => read_quoted(chars, i).unwrap_or_default(),
        Some('{') | Some('[') => {
            let open = chars[*i];
            let close = if open == '{' { '}' } else { ']' };
            let start = *i;
            let mut depth = 0usize;
            let mut in_string = false;
            let mut escaped = false;
            while *i < chars.len() {
                let c = chars[*i];
                if in_string {
                    if escaped {
                        escaped = false;
                    } else if c == '\\' {
                        escaped = true;
                    } else if c == '"' {
                        in_string = false;
                    }
                } else if c == '"' {
                    in_string = true;
                } else if c == open {
                    depth += 1;
                } else if c == close {
                    depth -= 1;
                    if depth == 0 {
                        *i += 1;
                        break;
                    }
                }
                *i += 1;
            }
            chars[start..*i].iter().collect()
        }
        _ => {
            let start = *i;
            let mut end = *i;
            while *i < chars.len() {
                let c = chars[*i];
                if c == ',' && next_is_key(chars, *i + 1) {
                    break;
                }
                if c == '\n' {
                    break;
                }
                *i += 1;
                if !c.is_whitespace() {
                    end = *i;
                }
            }
            chars[start..end].iter().collect()
        }
    }
}

/// True when the text after a comma looks like `key:` (quoted or bare),
/// meaning the comma terminates the current unquoted value.
fn next_is_key(chars: &[char], mut i: usize) -> bool {
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    match chars.get(i) {
        Some('"') => {
            i += 1;
            while i < chars.len() && chars[i] != '"' {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i += 1;
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            chars.get(i) == Some(&':')
        }
        Some(c) if c.is_alphabetic() || *c == '_' => {
            while i < chars.len()
                && (chars[i].is_alphanumeric() || matches!(chars[i], '_' | '-' | ' '))
            {
                i += 1;
            }
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            chars.get(i) == Some(&':')
        }
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Key alignment
// ---------------------------------------------------------------------------

fn alnum_fold(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(|c| c.to_lowercase())
        .collect()
}

/// Assigns block keys to requested fields: exact id match first, then id
/// substring (longest id wins per key), then display-name containment.
fn align_keys<'a>(
    pairs: &'a [(String, String)],
    fields: &[&FieldSpec],
) -> BTreeMap<String, &'a str> {
    let mut resolved: BTreeMap<String, &str> = BTreeMap::new();
    let mut claimed = vec![false; pairs.len()];

    for field in fields {
        let fid = alnum_fold(&field.id);
        for (idx, (key, value)) in pairs.iter().enumerate() {
            if claimed[idx] || resolved.contains_key(&field.id) {
                continue;
            }
            if alnum_fold(key) == fid {
                resolved.insert(field.id.clone(), value.as_str());
                claimed[idx] = true;
            }
        }
    }
    for (idx, (key, value)) in pairs.iter().enumerate() {
        if claimed[idx] {
            continue;
        }
        let key_norm = alnum_fold(key);
        let best = fields
            .iter()
            .filter(|f| !resolved.contains_key(&f.id))
            .filter(|f| key_norm.contains(&alnum_fold(&f.id)))
            .max_by_key(|f| f.id.len());
        if let Some(field) = best {
            resolved.insert(field.id.clone(), value.as_str());
            claimed[idx] = true;
        }
    }
    for (idx, (key, value)) in pairs.iter().enumerate() {
        if claimed[idx] {
            continue;
        }
        let key_norm = alnum_fold(key);
        if key_norm.is_empty() {
            continue;
        }
        let best = fields
            .iter()
            .filter(|f| !resolved.contains_key(&f.id))
            .filter(|f| {
                let display = alnum_fold(&f.display_name);
                !display.is_empty() && (key_norm.contains(&display) || display.contains(&key_norm))
            })
            .max_by_key(|f| f.display_name.len());
        if let Some(field) = best {
            resolved.insert(field.id.clone(), value.as_str());
            claimed[idx] = true;
        }
    }
    resolved
}

fn label_matches_field(label: &str, field: &FieldSpec) -> bool {
    let label_norm = alnum_fold(label);
    if label_norm.is_empty() {
        return false;
    }
    let id = alnum_fold(&field.id);
    let display = alnum_fold(&field.display_name);
    label_norm == id
        || label_norm.contains(&id)
        || (!display.is_empty() && label_norm.contains(&display))
}

/// Scans `label: value` / `label = value` lines for one whose short label
/// names the field. For numeric fields a non-empty right side must contain
/// a digit, which keeps running prose like `Tax = Total x Rate` out.
fn keyvalue_line_scan(text: &str, field: &FieldSpec) -> Option<String> {
    for line in text.lines() {
        for sep in [':', '='] {
            let Some((left, right)) = line.split_once(sep) else {
                continue;
            };
            let left = left.trim();
            if left.is_empty() || left.split_whitespace().count() > 4 {
                continue;
            }
            if !label_matches_field(left, field) {
                continue;
            }
            let right = right.trim();
            if field.kind == FieldKind::Numeric
                && !right.is_empty()
                && !right.chars().any(|c| c.is_ascii_digit())
            {
                continue;
            }
            return Some(right.to_string());
        }
    }
    None
}

/// All number tokens in prose order: digit runs with internal `.`/`,`
/// separators, each separator immediately followed by a digit.
fn scan_numbers(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            let mut token = String::new();
            if i > 0 && (chars[i - 1] == '-' || chars[i - 1] == '+') {
                token.push(chars[i - 1]);
            }
            while i < chars.len() {
                let c = chars[i];
                let separator_before_digit =
                    (c == '.' || c == ',') && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
                if c.is_ascii_digit() || separator_before_digit {
                    token.push(c);
                    i += 1;
                } else {
                    break;
                }
            }
            out.push(token);
        } else {
            i += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Response parsers
// ---------------------------------------------------------------------------

fn parsed(raw: &str, source: ValueSource, kind: FieldKind, profile: NumericProfile) -> ParsedValue {
    let mut value = normalize(raw, kind, profile);
    value.source = source;
    value
}

/// Recovers one field's value from a separate-extraction response.
///
/// Tries, in order: a structured block containing a key aligned to the
/// field; a short `label: value` line; and, for numeric fields, the final
/// number in the text (prose answers tend to end with the computed value).
/// Returns `None` when no candidate is found.
pub fn parse_separate_response(
    text: &str,
    field: &FieldSpec,
    profile: NumericProfile,
) -> Option<ParsedValue> {
    for block in find_blocks(text) {
        let pairs = parse_block(block);
        if pairs.is_empty() {
            continue;
        }
        let aligned = align_keys(&pairs, &[field]);
        if let Some(raw) = aligned.get(&field.id) {
            return Some(parsed(raw, ValueSource::JsonBlock, field.kind, profile));
        }
    }
    if let Some(raw) = keyvalue_line_scan(text, field) {
        return Some(parsed(&raw, ValueSource::KeyValueLine, field.kind, profile));
    }
    if field.kind == FieldKind::Numeric {
        if let Some(raw) = scan_numbers(text).pop() {
            return Some(parsed(&raw, ValueSource::ProseTail, field.kind, profile));
        }
    }
    None
}

/// Recovers every requested field from a joint-extraction response.
///
/// The largest structured block is aligned to the field list; fields absent
/// from it fall back to per-field `label: value` scanning, and unresolved
/// fields map to `None`. Extra keys are ignored.
pub fn parse_joint_response(
    text: &str,
    fields: &[FieldSpec],
    profile: NumericProfile,
) -> BTreeMap<String, Option<ParsedValue>> {
    let refs: Vec<&FieldSpec> = fields.iter().collect();
    let mut out: BTreeMap<String, Option<ParsedValue>> = BTreeMap::new();

    let best_block = find_blocks(text)
        .into_iter()
        .map(parse_block)
        .max_by_key(|pairs| pairs.len())
        .unwrap_or_default();
    let aligned = align_keys(&best_block, &refs);

    for field in fields {
        let value = match aligned.get(&field.id) {
            Some(raw) => Some(parsed(raw, ValueSource::JsonBlock, field.kind, profile)),
            None => keyvalue_line_scan(text, field)
                .map(|raw| parsed(&raw, ValueSource::KeyValueLine, field.kind, profile)),
        };
        out.insert(field.id.clone(), value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const GD: NumericProfile = NumericProfile::GroupingDot;
    const DD: NumericProfile = NumericProfile::DecimalDot;

    fn numeric(id: &str, display: &str) -> FieldSpec {
        FieldSpec::new(id, display, FieldKind::Numeric)
    }

    #[test]
    fn normalize_strips_currency() {
        let a = normalize("$3.50", FieldKind::Numeric, DD);
        let b = normalize("3.50", FieldKind::Numeric, DD);
        assert_eq!(a.numeric_digits.as_deref(), Some("350"));
        assert_eq!(a.numeric_digits, b.numeric_digits);
    }

    #[test]
    fn normalize_strips_zero_cents_suffix() {
        let v = normalize("Rp 1.000,-", FieldKind::Numeric, GD);
        assert_eq!(v.normalized, "1.000");
        assert_eq!(v.numeric_digits.as_deref(), Some("1000"));
        // A bare trailing minus is not an amount suffix.
        assert_eq!(normalize("5-", FieldKind::Numeric, GD).numeric_digits, None);
    }

    #[test]
    fn quoted_values_decode_unicode_escapes() {
        let field = FieldSpec::new("company", "Company Name", FieldKind::Text);
        let text = r#"{"company": "Café Indah"}"#;
        let v = parse_separate_response(text, &field, GD).unwrap();
        assert_eq!(v.raw, "Café Indah");
    }

    #[test]
    fn normalize_drops_grouping_separators() {
        let v = normalize("1,346,000.", FieldKind::Numeric, GD);
        assert_eq!(v.numeric_digits.as_deref(), Some("1346000"));
        assert_eq!(v.normalized, "1,346,000");
    }

    #[test]
    fn normalize_text_folds_case_and_whitespace() {
        let v = normalize("  ABC  Store ", FieldKind::Text, DD);
        assert_eq!(v.normalized, "abc store");
    }

    #[test]
    fn normalize_is_idempotent() {
        for (value, kind) in [
            ("  ABC  Store ", FieldKind::Text),
            ("$3.50", FieldKind::Numeric),
            ("Rp 1.346.000,-", FieldKind::Numeric),
            ("25/12/2018", FieldKind::Date),
            ("3/4/94", FieldKind::Date),
        ] {
            let once = normalize(value, kind, GD);
            let twice = normalize(&once.normalized, kind, GD);
            assert_eq!(once.normalized, twice.normalized, "value {value:?}");
        }
    }

    #[test]
    fn date_canonicalizes_unambiguous_orderings() {
        assert_eq!(
            normalize("25/12/2018", FieldKind::Date, DD).normalized,
            "2018-12-25"
        );
        assert_eq!(
            normalize("2018-3-4", FieldKind::Date, DD).normalized,
            "2018-03-04"
        );
        assert_eq!(
            normalize("12/25/2018", FieldKind::Date, DD).normalized,
            "2018-12-25"
        );
        // Ambiguous day/month order stays verbatim.
        assert_eq!(
            normalize("3/4/94", FieldKind::Date, DD).normalized,
            "3/4/94"
        );
    }

    #[test]
    fn match_accepts_trailing_period() {
        let v = values_match("43.636.", "43.636", FieldKind::Numeric, GD);
        assert!(v.matched);
        assert_eq!(v.reason, MatchReason::DigitsEqual);
    }

    #[test]
    fn match_rejects_different_amounts() {
        let v = values_match("100,950.", "144,695", FieldKind::Numeric, GD);
        assert!(!v.matched);
        assert_eq!(v.reason, MatchReason::Mismatch);
    }

    #[test]
    fn match_is_reflexive_exact() {
        for x in ["", "48.000", "ABC", "?!"] {
            let v = values_match(x, x, FieldKind::Text, GD);
            assert!(v.matched);
            assert_eq!(v.reason, MatchReason::Exact);
        }
    }

    #[test]
    fn grouping_dot_digit_soundness() {
        let a = normalize("48.000", FieldKind::Numeric, GD).numeric_digits;
        let b = normalize("48,000", FieldKind::Numeric, GD).numeric_digits;
        let c = normalize("48000", FieldKind::Numeric, GD).numeric_digits;
        assert_eq!(a.as_deref(), Some("48000"));
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn bare_48_does_not_match_grouped_48000() {
        assert!(!values_match("48", "48.000", FieldKind::Numeric, GD).matched);
    }

    #[test]
    fn zero_groups_of_different_width_match() {
        let v = values_match("2.00.", "2.000", FieldKind::Numeric, GD);
        assert!(v.matched);
        assert_eq!(v.reason, MatchReason::DigitsEqual);
        // ...but non-zero groups must be identical.
        assert!(!values_match("3.5", "3.50", FieldKind::Numeric, DD).matched);
    }

    #[test]
    fn unparseable_numeric_prediction() {
        let v = values_match("I cannot tell", "48.000", FieldKind::Numeric, GD);
        assert!(!v.matched);
        assert_eq!(v.reason, MatchReason::Unparseable);
    }

    #[test]
    fn separate_parses_json_block() {
        let field = numeric("tax", "Tax");
        let v = parse_separate_response(r#"{"tax_price": "4.364."}"#, &field, GD).unwrap();
        assert_eq!(v.raw, "4.364.");
        assert_eq!(v.source, ValueSource::JsonBlock);
    }

    #[test]
    fn separate_parses_prose_tail() {
        let field = numeric("tax", "Tax");
        let text = "The receipt shows a total amount of 51,300 and a tax price of 10%. \
                    We can calculate the tax price as follows:\n\
                    Tax Price = Total Amount x Tax Rate\n= 51,300 x 0.10\n= 5,130";
        let v = parse_separate_response(text, &field, GD).unwrap();
        assert_eq!(v.raw, "5,130");
        assert_eq!(v.source, ValueSource::ProseTail);
    }

    #[test]
    fn separate_change_prose_tail() {
        let field = numeric("change", "Change");
        let text = "The receipt shows a total amount of 80,500 and a cash payment of 100,000. \
                    To calculate the change, we subtract the total from the payment amount: \
                    100,000 - 80,500 = 19,500. This calculation reveals that the change amount \
                    is 19,500.";
        let v = parse_separate_response(text, &field, GD).unwrap();
        assert_eq!(v.raw, "19,500");
    }

    #[test]
    fn separate_unparseable_without_number() {
        let field = numeric("tax", "Tax");
        assert!(parse_separate_response("I cannot determine this.", &field, GD).is_none());
    }

    #[test]
    fn joint_parses_loose_numeric_block() {
        let fields = vec![
            numeric("subtotal", "Subtotal"),
            numeric("service", "Service"),
            numeric("tax", "Tax"),
            numeric("total", "Total"),
        ];
        let text = r#"{"subtotal_price": 1,346,000, "service_price": 100,950, "tax_price": 144,695, "total_price": 1,591,600}"#;
        let out = parse_joint_response(text, &fields, GD);
        assert_eq!(out["subtotal"].as_ref().unwrap().raw, "1,346,000");
        assert_eq!(out["service"].as_ref().unwrap().raw, "100,950");
        assert_eq!(out["tax"].as_ref().unwrap().raw, "144,695");
        assert_eq!(out["total"].as_ref().unwrap().raw, "1,591,600");
    }

    #[test]
    fn joint_resolves_concatenated_keys() {
        let fields = vec![
            numeric("subtotal", "Subtotal"),
            numeric("tax", "Tax"),
            numeric("total", "Total"),
            numeric("cash", "Cash"),
            numeric("change", "Change"),
        ];
        let text = r#"{"subtotal_price": 43.636, "tax_price": 4.364, "total_price": 48.000, "cashprice": 50.000, "changeprice": 2.000}"#;
        let out = parse_joint_response(text, &fields, GD);
        assert_eq!(out.len(), 5);
        assert_eq!(out["tax"].as_ref().unwrap().raw, "4.364");
        assert_eq!(out["cash"].as_ref().unwrap().raw, "50.000");
    }

    #[test]
    fn joint_ignores_extra_keys() {
        let fields = vec![numeric("subtotal", "Subtotal"), numeric("tax", "Tax")];
        let text = r#"{"subtotal": "10.000", "currency": "IDR", "tax": "1.000"}"#;
        let out = parse_joint_response(text, &fields, GD);
        assert_eq!(out["subtotal"].as_ref().unwrap().raw, "10.000");
        assert_eq!(out["tax"].as_ref().unwrap().raw, "1.000");
    }

    #[test]
    fn joint_prose_fixtures_resolve() {
        let fields = vec![numeric("subtotal", "Subtotal"), numeric("tax", "Tax")];
        let fixtures: &[(&str, &str, &str)] = &[
            ("Subtotal: 10,000\nTax: 1,000", "10,000", "1,000"),
            (
                "Here are the values.\nSubtotal: 10,000\nTax: 1,000\nThank you!",
                "10,000",
                "1,000",
            ),
            ("subtotal: 5.000\ntax: 500", "5.000", "500"),
            ("Subtotal = 4,500\nTax = 450", "4,500", "450"),
            ("SUBTOTAL: 12,000\nTAX: 1,200", "12,000", "1,200"),
            ("Subtotal amount: 9,000\nTax amount: 900", "9,000", "900"),
            ("- Subtotal: 3,000\n- Tax: 300", "3,000", "300"),
            ("Subtotal: 7,000.\nTax: 700.", "7,000.", "700."),
            ("Subtotal: Rp 8.000\nTax: Rp 800", "Rp 8.000", "Rp 800"),
            (
                "Note. see receipt\nSubtotal: 2,000\nTax: 200",
                "2,000",
                "200",
            ),
        ];
        for (text, subtotal, tax) in fixtures {
            let out = parse_joint_response(text, &fields, GD);
            assert_eq!(
                out["subtotal"].as_ref().map(|v| v.raw.as_str()),
                Some(*subtotal),
                "fixture: {text:?}"
            );
            assert_eq!(
                out["tax"].as_ref().map(|v| v.raw.as_str()),
                Some(*tax),
                "fixture: {text:?}"
            );
        }
    }

    #[test]
    fn joint_and_separate_agree_on_single_block() {
        let fields = vec![numeric("tax", "Tax"), numeric("total", "Total")];
        let text = r#"{"tax": "4.364", "total": "48.000"}"#;
        let joint = parse_joint_response(text, &fields, GD);
        for field in &fields {
            let sep = parse_separate_response(text, field, GD).unwrap();
            assert_eq!(joint[&field.id].as_ref().unwrap(), &sep);
        }
    }

    #[test]
    fn code_fenced_json_parses() {
        let field = numeric("total", "Total");
        let text = "Sure! Here you go:\n```json\n{\"total\": \"48.000\"}\n```";
        let v = parse_separate_response(text, &field, GD).unwrap();
        assert_eq!(v.raw, "48.000");
        assert_eq!(v.source, ValueSource::JsonBlock);
    }

    proptest::proptest! {
        #[test]
        fn match_is_symmetric(
            a in ".{0,24}",
            b in ".{0,24}",
            kind_sel in 0u8..3,
            profile_sel in 0u8..2,
        ) {
            let kind = match kind_sel {
                0 => FieldKind::Numeric,
                1 => FieldKind::Text,
                _ => FieldKind::Date,
            };
            let profile = if profile_sel == 0 { GD } else { DD };
            proptest::prop_assert_eq!(
                values_match(&a, &b, kind, profile),
                values_match(&b, &a, kind, profile)
            );
        }

        #[test]
        fn normalized_form_is_fixed_point(value in ".{0,32}", kind_sel in 0u8..3) {
            let kind = match kind_sel {
                0 => FieldKind::Numeric,
                1 => FieldKind::Text,
                _ => FieldKind::Date,
            };
            let once = normalize(&value, kind, GD);
            let twice = normalize(&once.normalized, kind, GD);
            proptest::prop_assert_eq!(once.normalized, twice.normalized);
        }

        #[test]
        fn parsers_never_panic_on_arbitrary_input(text in ".{0,200}") {
            let fields = vec![
                FieldSpec::new("tax", "Tax", FieldKind::Numeric),
                FieldSpec::new("company", "Company Name", FieldKind::Text),
            ];
            for field in &fields {
                let _ = parse_separate_response(&text, field, GD);
            }
            let out = parse_joint_response(&text, &fields, GD);
            proptest::prop_assert_eq!(out.len(), fields.len());
        }
    }
}
