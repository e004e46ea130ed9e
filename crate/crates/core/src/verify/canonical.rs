//! Answer canonicalization grammar.
//!
//! Detection order: choice letter, interval, set, unit-bearing number,
//! plain number, fraction / `\frac`, symbolic (`\pi`, radicals), text.

use std::fmt;
use std::sync::OnceLock;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use regex::Regex;

use super::VerifyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnswerKind {
    Numeric,
    Fraction,
    ChoiceLetter,
    Interval,
    Text,
    SetOfForms,
}

impl AnswerKind {
    pub fn is_numeric(self) -> bool {
        matches!(self, AnswerKind::Numeric | AnswerKind::Fraction)
    }
}

/// Units stripped from a numeric answer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UnitFlags {
    pub percent: bool,
    pub currency: bool,
    pub degree: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bound {
    NegInf,
    PosInf,
    Finite(AnswerForm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub left_closed: bool,
    pub right_closed: bool,
    pub lo: Box<Bound>,
    pub hi: Box<Bound>,
}

/// A parsed, normalized answer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerForm {
    pub kind: AnswerKind,
    pub canonical: String,
    /// Exact value for numeric and fraction kinds.
    pub value: Option<BigRational>,
    /// Set when the value came from a decimal literal that may be truncated.
    pub approximate: bool,
    pub units: UnitFlags,
    /// Upper-case option letter for choice answers.
    pub choice: Option<char>,
    /// Equivalent surface forms; for a choice answer, the option content.
    pub aliases: Vec<AnswerForm>,
    pub interval: Option<Interval>,
    pub elements: Vec<AnswerForm>,
    /// Exact `c·√r·π^k` normal form held as text.
    pub symbolic: bool,
}

impl AnswerForm {
    fn bare(kind: AnswerKind, canonical: String) -> Self {
        AnswerForm {
            kind,
            canonical,
            value: None,
            approximate: false,
            units: UnitFlags::default(),
            choice: None,
            aliases: Vec::new(),
            interval: None,
            elements: Vec::new(),
            symbolic: false,
        }
    }

    fn numeric(value: BigRational, kind: AnswerKind, approximate: bool) -> Self {
        let (kind, canonical) = if kind == AnswerKind::Fraction && !value.denom().is_one() {
            (AnswerKind::Fraction, format!("{}/{}", value.numer(), value.denom()))
        } else if kind == AnswerKind::Fraction {
            (AnswerKind::Numeric, value.numer().to_string())
        } else {
            (AnswerKind::Numeric, decimal_string(&value))
        };
        AnswerForm {
            value: Some(value),
            approximate,
            ..AnswerForm::bare(kind, canonical)
        }
    }
}

impl fmt::Display for AnswerForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

fn re(cell: &'static OnceLock<Regex>, pat: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pat).expect("static regex"))
}

/// Parses `raw` into its canonical [`AnswerForm`].
pub fn canonicalize_answer(raw: &str) -> Result<AnswerForm, VerifyError> {
    let s = strip_wrappers(raw.trim());
    if s.is_empty() {
        return Err(VerifyError::EmptyAnswer);
    }
    Ok(parse_form(&s))
}

fn parse_form(s: &str) -> AnswerForm {
    if let Some(f) = parse_choice(s) {
        return f;
    }
    if let Some(f) = parse_interval(s) {
        return f;
    }
    if let Some(f) = parse_set(s) {
        return f;
    }
    parse_scalar(s)
}

fn parse_scalar(s: &str) -> AnswerForm {
    if let Some(f) = parse_with_units(s) {
        return f;
    }
    if let Some((v, approx)) = parse_decimal(s) {
        return AnswerForm::numeric(v, AnswerKind::Numeric, approx);
    }
    if let Some(f) = parse_symbolic_form(s) {
        return f;
    }
    text_form(s)
}

fn text_form(s: &str) -> AnswerForm {
    let mut t = s
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    while t.ends_with('.') {
        t.pop();
    }
    let t = t
        .trim_matches(|c| c == '"' || c == '\'' || c == '`')
        .trim()
        .to_string();
    AnswerForm::bare(AnswerKind::Text, t)
}

/// Removes `\boxed{}`, `\text{}`, `$…$` and `\(…\)` wrappers.
fn strip_wrappers(s: &str) -> String {
    let mut cur = s.trim().to_string();
    loop {
        let before = cur.clone();
        for open in ["\\boxed{", "\\text{", "\\mathrm{", "\\textbf{"] {
            if cur.starts_with(open) && cur.ends_with('}') {
                let inner = &cur[open.len()..cur.len() - 1];
                if balanced(inner) {
                    cur = inner.trim().to_string();
                }
            }
        }
        for (l, r) in [("$$", "$$"), ("\\(", "\\)"), ("\\[", "\\]")] {
            if cur.len() >= l.len() + r.len() && cur.starts_with(l) && cur.ends_with(r) {
                cur = cur[l.len()..cur.len() - r.len()].trim().to_string();
            }
        }
        // A single pair of `$` delimiters, but not a currency amount like `$5`.
        if cur.len() >= 2 && cur.starts_with('$') && cur.ends_with('$') {
            cur = cur[1..cur.len() - 1].trim().to_string();
        }
        if cur == before {
            return cur;
        }
    }
}

fn balanced(s: &str) -> bool {
    let mut depth = 0i32;
    for c in s.chars() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

fn parse_choice(s: &str) -> Option<AnswerForm> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = re(&RE, r"^\(?([A-Za-z])\)?(?:\s*[.):：]\s*(.*))?$");
    let caps = re.captures(s)?;
    let whole = caps.get(0)?.as_str();
    // "(a" or "a)" without a separator is malformed; require matched parens.
    if whole.starts_with('(') && !whole[1..].starts_with(|c: char| c.is_ascii_alphabetic()) {
        return None;
    }
    if whole.starts_with('(') && !whole.get(2..)?.starts_with(')') {
        return None;
    }
    let letter = caps[1].chars().next()?.to_ascii_uppercase();
    let mut form = AnswerForm::bare(AnswerKind::ChoiceLetter, letter.to_ascii_lowercase().to_string());
    form.choice = Some(letter);
    if let Some(rest) = caps.get(2) {
        let rest = strip_wrappers(rest.as_str().trim());
        if !rest.is_empty() {
            form.aliases.push(parse_form(&rest));
        }
    }
    Some(form)
}

fn parse_bound(s: &str) -> Option<Bound> {
    let t = s.trim();
    match t {
        "-\\infty" | "-inf" | "-∞" | "-infinity" => return Some(Bound::NegInf),
        "\\infty" | "+\\infty" | "inf" | "+inf" | "∞" | "+∞" | "infinity" => {
            return Some(Bound::PosInf)
        }
        _ => {}
    }
    let f = parse_scalar(t);
    (f.kind.is_numeric() || f.symbolic).then_some(Bound::Finite(f))
}

fn bound_str(b: &Bound) -> String {
    match b {
        Bound::NegInf => "-inf".into(),
        Bound::PosInf => "inf".into(),
        Bound::Finite(f) => f.canonical.clone(),
    }
}

fn parse_interval(s: &str) -> Option<AnswerForm> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = re(&RE, r"^([\[(])\s*([^,\[\]()]+?)\s*,\s*([^,\[\]()]+?)\s*([\])])$");
    let caps = re.captures(s)?;
    let lo = parse_bound(&caps[2])?;
    let hi = parse_bound(&caps[3])?;
    let interval = Interval {
        left_closed: &caps[1] == "[",
        right_closed: &caps[4] == "]",
        lo: Box::new(lo),
        hi: Box::new(hi),
    };
    let canonical = format!(
        "{}{}, {}{}",
        if interval.left_closed { "[" } else { "(" },
        bound_str(&interval.lo),
        bound_str(&interval.hi),
        if interval.right_closed { "]" } else { ")" },
    );
    let mut form = AnswerForm::bare(AnswerKind::Interval, canonical);
    form.interval = Some(interval);
    Some(form)
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ',' | ';' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn parse_set(s: &str) -> Option<AnswerForm> {
    let inner = if let Some(x) = s.strip_prefix("\\{").and_then(|x| x.strip_suffix("\\}")) {
        x
    } else if let Some(x) = s.strip_prefix('{').and_then(|x| x.strip_suffix('}')) {
        x
    } else {
        if is_thousands(s) {
            return None;
        }
        s
    };
    let parts = split_top_level(inner);
    if parts.len() < 2 || parts.iter().any(|p| p.trim().is_empty()) {
        return None;
    }
    let mut elements: Vec<AnswerForm> = parts
        .iter()
        .map(|p| parse_form(&strip_wrappers(p.trim())))
        .collect();
    elements.sort_by(|a, b| a.canonical.cmp(&b.canonical));
    let canonical = format!(
        "{{{}}}",
        elements
            .iter()
            .map(|e| e.canonical.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    let mut form = AnswerForm::bare(AnswerKind::SetOfForms, canonical);
    form.elements = elements;
    Some(form)
}

fn is_thousands(s: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$").is_match(s)
}

/// Strips `%`, `$` and `°` (and their LaTeX spellings) around a number.
fn parse_with_units(s: &str) -> Option<AnswerForm> {
    let mut units = UnitFlags::default();
    let mut core = s.trim();
    for p in ["\\$", "$"] {
        if let Some(rest) = core.strip_prefix(p) {
            units.currency = true;
            core = rest.trim_start();
            break;
        }
    }
    for suf in ["\\%", "%"] {
        if let Some(rest) = core.strip_suffix(suf) {
            units.percent = true;
            core = rest.trim_end();
            break;
        }
    }
    for suf in ["^{\\circ}", "^\\circ", "°"] {
        if let Some(rest) = core.strip_suffix(suf) {
            units.degree = true;
            core = rest.trim_end();
            break;
        }
    }
    if units == UnitFlags::default() {
        return None;
    }
    let (value, approximate, kind) = if let Some((v, a)) = parse_decimal(core) {
        (v, a, AnswerKind::Numeric)
    } else {
        let f = parse_symbolic_form(core)?;
        if !f.kind.is_numeric() {
            return None;
        }
        (f.value?, f.approximate, f.kind)
    };
    let value = if units.percent {
        value / BigRational::from_integer(BigInt::from(100))
    } else {
        value
    };
    let kind = if units.percent { AnswerKind::Numeric } else { kind };
    let mut form = if units.percent && !has_terminating_decimal(&value) {
        AnswerForm::numeric(value, AnswerKind::Fraction, approximate)
    } else {
        AnswerForm::numeric(value, kind, approximate)
    };
    form.units = units;
    Some(form)
}

fn has_terminating_decimal(v: &BigRational) -> bool {
    let mut d = v.denom().clone();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    while (&d % &two).is_zero() {
        d /= &two;
    }
    while (&d % &five).is_zero() {
        d /= &five;
    }
    d.is_one()
}

/// Exact value of a signed decimal or scientific literal. The flag is set
/// when the literal carries fractional digits.
fn parse_decimal(s: &str) -> Option<(BigRational, bool)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = re(&RE, r"^([+-])?(\d+)?(?:\.(\d*))?(?:[eE]([+-]?\d+))?$");
    let t: String = if is_thousands(s) { s.replace(',', "") } else { s.to_string() };
    let caps = re.captures(&t)?;
    let int = caps.get(2).map_or("", |m| m.as_str());
    let frac = caps.get(3).map_or("", |m| m.as_str());
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    let exp: i64 = match caps.get(4) {
        Some(m) => m.as_str().parse().ok()?,
        None => 0,
    };
    if exp.abs() > 1000 {
        return None;
    }
    let digits: BigInt = format!("{int}{frac}0").parse::<BigInt>().ok()? / BigInt::from(10);
    let scale = exp - frac.len() as i64;
    let ten = BigInt::from(10);
    let mut v = BigRational::from_integer(digits);
    if scale >= 0 {
        v *= BigRational::from_integer(num_traits::pow(ten, scale as usize));
    } else {
        v /= BigRational::from_integer(num_traits::pow(ten, (-scale) as usize));
    }
    if caps.get(1).map(|m| m.as_str()) == Some("-") {
        v = -v;
    }
    Some((v, !frac.is_empty()))
}

/// Plain decimal rendering of a terminating rational; `p/q` otherwise.
pub(crate) fn decimal_string(v: &BigRational) -> String {
    if v.denom().is_one() {
        return v.numer().to_string();
    }
    if !has_terminating_decimal(v) {
        return format!("{}/{}", v.numer(), v.denom());
    }
    let neg = v.is_negative();
    let a = v.abs();
    let ten = BigInt::from(10);
    let mut scale = 0usize;
    let mut scaled = a.clone();
    while !scaled.denom().is_one() {
        scaled *= BigRational::from_integer(ten.clone());
        scale += 1;
    }
    let digits = scaled.numer().to_string();
    let digits = if digits.len() <= scale {
        format!("{}{}", "0".repeat(scale + 1 - digits.len()), digits)
    } else {
        digits
    };
    let (ip, fp) = digits.split_at(digits.len() - scale);
    format!("{}{}.{}", if neg { "-" } else { "" }, ip, fp)
}

/// `coeff · √radicand · π^pi` with a square-free radicand.
#[derive(Debug, Clone, PartialEq)]
struct Symbolic {
    coeff: BigRational,
    radicand: u64,
    pi: u32,
    approximate: bool,
}

impl Symbolic {
    fn rational(v: BigRational, approximate: bool) -> Self {
        Symbolic { coeff: v, radicand: 1, pi: 0, approximate }
    }

    fn mul(self, o: Symbolic) -> Option<Symbolic> {
        let r = self.radicand.checked_mul(o.radicand)?;
        let (outside, inside) = square_free(r);
        Some(Symbolic {
            coeff: self.coeff * o.coeff * BigRational::from_integer(BigInt::from(outside)),
            radicand: inside,
            pi: self.pi + o.pi,
            approximate: self.approximate || o.approximate,
        })
    }

    fn div(self, o: Symbolic) -> Option<Symbolic> {
        if o.pi > 0 || o.coeff.is_zero() {
            return None;
        }
        // a / (c√r) = a√r / (c·r)
        let rad = Symbolic::rational(
            BigRational::from_integer(BigInt::one()),
            false,
        );
        let rad = Symbolic { radicand: o.radicand, ..rad };
        let num = self.mul(rad)?;
        Some(Symbolic {
            coeff: num.coeff / (o.coeff * BigRational::from_integer(BigInt::from(o.radicand))),
            approximate: num.approximate || o.approximate,
            ..num
        })
    }

    fn render(&self) -> String {
        let mut factors = Vec::new();
        let numer = self.coeff.numer().abs();
        if !numer.is_one() || (self.radicand == 1 && self.pi == 0) {
            factors.push(numer.to_string());
        }
        if self.radicand != 1 {
            factors.push(format!("sqrt({})", self.radicand));
        }
        for _ in 0..self.pi {
            factors.push("pi".into());
        }
        let mut s = String::new();
        if self.coeff.is_negative() {
            s.push('-');
        }
        s.push_str(&factors.join("*"));
        if !self.coeff.denom().is_one() {
            s.push('/');
            s.push_str(&self.coeff.denom().to_string());
        }
        s
    }
}

fn square_free(n: u64) -> (u64, u64) {
    let mut outside = 1u64;
    let mut inside = n;
    let mut p = 2u64;
    while p * p <= inside {
        while inside % (p * p) == 0 {
            inside /= p * p;
            outside *= p;
        }
        p += 1;
    }
    (outside, inside)
}

fn parse_symbolic_form(s: &str) -> Option<AnswerForm> {
    let (sym, had_div) = parse_quotient(s.trim())?;
    if sym.coeff.is_zero() {
        return Some(AnswerForm::numeric(BigRational::zero(), AnswerKind::Numeric, sym.approximate));
    }
    if sym.radicand == 1 && sym.pi == 0 {
        let kind = if had_div { AnswerKind::Fraction } else { AnswerKind::Numeric };
        return Some(AnswerForm::numeric(sym.coeff, kind, sym.approximate));
    }
    let mut form = AnswerForm::bare(AnswerKind::Text, sym.render());
    form.symbolic = true;
    form.approximate = sym.approximate;
    Some(form)
}

/// `A / B`, `\frac{A}{B}` or a bare product.
fn parse_quotient(s: &str) -> Option<(Symbolic, bool)> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest.trim_start()),
        None => (false, s.strip_prefix('+').unwrap_or(s).trim_start()),
    };
    let (sym, had_div) = if let Some((num, den, rest)) = take_frac(body) {
        if !rest.trim().is_empty() {
            // \frac{..}{..}\pi and similar trailing factors
            let tail = parse_product(rest.trim())?;
            let q = parse_quotient_parts(num, den)?;
            (q.mul(tail)?, true)
        } else {
            (parse_quotient_parts(num, den)?, true)
        }
    } else if let Some(idx) = top_level_slash(body) {
        (parse_quotient_parts(&body[..idx], &body[idx + 1..])?, true)
    } else {
        (parse_product(body)?, false)
    };
    let sym = if neg { Symbolic { coeff: -sym.coeff, ..sym } } else { sym };
    Some((sym, had_div))
}

fn parse_quotient_parts(num: &str, den: &str) -> Option<Symbolic> {
    let (n, _) = parse_quotient(num.trim())?;
    let (d, _) = parse_quotient(den.trim())?;
    n.div(d)
}

fn top_level_slash(s: &str) -> Option<usize> {
    let mut depth = 0i32;
    let mut found = None;
    for (i, c) in s.char_indices() {
        match c {
            '{' | '(' => depth += 1,
            '}' | ')' => depth -= 1,
            '/' if depth == 0 => {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
            _ => {}
        }
    }
    found
}

/// Splits `\frac{A}{B}rest` into its parts.
fn take_frac(s: &str) -> Option<(&str, &str, &str)> {
    let rest = ["\\frac", "\\dfrac", "\\tfrac"]
        .iter()
        .find_map(|p| s.strip_prefix(p))?;
    let (a, rest) = take_group(rest.trim_start())?;
    let (b, rest) = take_group(rest.trim_start())?;
    Some((a, b, rest))
}

fn take_group(s: &str) -> Option<(&str, &str)> {
    if !s.starts_with('{') {
        // \frac12 shorthand: single characters
        let mut it = s.char_indices();
        let (_, c) = it.next()?;
        if !c.is_ascii_digit() {
            return None;
        }
        let end = c.len_utf8();
        return Some((&s[..end], &s[end..]));
    }
    let mut depth = 0i32;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((&s[1..i], &s[i + 1..]));
                }
            }
            _ => {}
        }
    }
    None
}

/// Product of a number, `\pi`/`π`/`pi`, and `\sqrt{n}`/`√n`/`sqrt(n)` factors.
fn parse_product(s: &str) -> Option<Symbolic> {
    let mut acc = Symbolic::rational(BigRational::one(), false);
    let mut rest = s.trim();
    let mut factors = 0;
    if rest.is_empty() {
        return None;
    }
    while !rest.is_empty() {
        rest = rest.trim_start();
        for sep in ["\\cdot", "\\times", "*", "×", "·"] {
            if factors > 0 {
                if let Some(r) = rest.strip_prefix(sep) {
                    rest = r.trim_start();
                    break;
                }
            }
        }
        if let Some(r) = ["\\pi", "π", "pi"].iter().find_map(|p| rest.strip_prefix(p)) {
            acc.pi += 1;
            rest = r;
        } else if let Some(r) = rest.strip_prefix("\\sqrt") {
            let (inner, r) = take_group(r.trim_start())?;
            acc = acc.mul(sqrt_factor(inner)?)?;
            rest = r;
        } else if let Some(r) = rest.strip_prefix("sqrt(") {
            let end = r.find(')')?;
            acc = acc.mul(sqrt_factor(&r[..end])?)?;
            rest = &r[end + 1..];
        } else if let Some(r) = rest.strip_prefix('√') {
            let end = r.find(|c: char| !c.is_ascii_digit()).unwrap_or(r.len());
            acc = acc.mul(sqrt_factor(&r[..end])?)?;
            rest = &r[end..];
        } else if let Some(r) = rest.strip_prefix('(') {
            let end = matching_paren(r)?;
            let (inner, _) = parse_quotient(&r[..end])?;
            acc = acc.mul(inner)?;
            rest = &r[end + 1..];
        } else {
            let end = rest
                .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E'))
                .unwrap_or(rest.len());
            // Avoid eating the "e" of a trailing word.
            let (lit, r) = rest.split_at(end);
            let (v, approx) = parse_decimal(lit)?;
            acc = Symbolic {
                coeff: acc.coeff * v,
                approximate: acc.approximate || approx,
                ..acc
            };
            rest = r;
        }
        factors += 1;
    }
    Some(acc)
}

fn matching_paren(s: &str) -> Option<usize> {
    let mut depth = 1i32;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn sqrt_factor(inner: &str) -> Option<Symbolic> {
    let n: u64 = inner.trim().parse().ok()?;
    if n == 0 {
        return Some(Symbolic::rational(BigRational::zero(), false));
    }
    let (outside, inside) = square_free(n);
    Some(Symbolic {
        coeff: BigRational::from_integer(BigInt::from(outside)),
        radicand: inside,
        pi: 0,
        approximate: false,
    })
}

/// Lossy conversion used for tolerance comparisons.
pub(crate) fn to_f64(v: &BigRational) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
