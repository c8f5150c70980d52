//! Polynomials over symbolic dimensions.
//!
//! A [`SymbolicExpr`] is a multivariate polynomial with integer coefficients,
//! stored as a map from [`Monomial`] to coefficient. Zero coefficients are
//! never stored, so two expressions are mathematically equal exactly when
//! they are structurally equal. Every symbol is assumed to take integer
//! values `>= 1`; that assumption is what lets [`compare`] draw definite
//! conclusions from coefficient signs alone.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::shape::ShapeConstraintGraph;

/// A symbolic dimension, printed as `S<k>` (or `@S<k>` in IR text).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Symbol(pub u32);

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// Concrete values for symbols.
pub type Env = BTreeMap<Symbol, i64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("Overflow: coefficient arithmetic exceeded 128 bits")]
    Overflow,
    #[error("UnboundSymbol: no value for {0}")]
    UnboundSymbol(Symbol),
}

/// A product of symbols, kept as a sorted multiset.
///
/// The ordering puts higher-degree monomials first and the constant
/// monomial last, which is also the order terms are rendered in.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct Monomial(Vec<Symbol>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(Vec::new())
    }

    pub fn from_symbols(mut syms: Vec<Symbol>) -> Self {
        syms.sort_unstable();
        Monomial(syms)
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, sym: Symbol) -> bool {
        self.0.binary_search(&sym).is_ok()
    }

    fn times(&self, other: &Monomial) -> Monomial {
        let mut syms = Vec::with_capacity(self.0.len() + other.0.len());
        syms.extend_from_slice(&self.0);
        syms.extend_from_slice(&other.0);
        Monomial::from_symbols(syms)
    }

    /// Splits off every occurrence of `sym`, returning the power removed.
    fn split(&self, sym: Symbol) -> (u32, Monomial) {
        let rest: Vec<Symbol> = self.0.iter().copied().filter(|s| *s != sym).collect();
        ((self.0.len() - rest.len()) as u32, Monomial(rest))
    }

    fn fmt_with(&self, f: &mut fmt::Formatter<'_>, prefix: &str) -> fmt::Result {
        let mut i = 0;
        let mut first = true;
        while i < self.0.len() {
            let sym = self.0[i];
            let mut j = i;
            while j < self.0.len() && self.0[j] == sym {
                j += 1;
            }
            if !first {
                f.write_str("*")?;
            }
            first = false;
            write!(f, "{prefix}{sym}")?;
            if j - i > 1 {
                write!(f, "^{}", j - i)?;
            }
            i = j;
        }
        Ok(())
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        other.degree().cmp(&self.degree()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Canonical polynomial over [`Symbol`]s with `i128` coefficients.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct SymbolicExpr {
    terms: BTreeMap<Monomial, i128>,
}

/// Result of a best-effort comparison. Definite answers hold for every
/// assignment of symbols to integers `>= 1` that satisfies the constraints.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize)]
pub enum CompareResult {
    DefinitelyLess,
    DefinitelyEqual,
    DefinitelyGreater,
    Unknown,
}

impl SymbolicExpr {
    pub fn zero() -> Self {
        SymbolicExpr::default()
    }

    pub fn constant(c: i128) -> Self {
        Self::term(c, Monomial::one())
    }

    pub fn symbol(sym: Symbol) -> Self {
        Self::term(1, Monomial(vec![sym]))
    }

    pub fn term(coeff: i128, mono: Monomial) -> Self {
        let mut terms = BTreeMap::new();
        if coeff != 0 {
            terms.insert(mono, coeff);
        }
        SymbolicExpr { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// The value if the expression has no symbols.
    pub fn as_constant(&self) -> Option<i128> {
        match self.terms.len() {
            0 => Some(0),
            1 => self.terms.get(&Monomial::one()).copied(),
            _ => None,
        }
    }

    /// Terms in canonical (rendering) order.
    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, i128)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn coeff(&self, mono: &Monomial) -> i128 {
        self.terms.get(mono).copied().unwrap_or(0)
    }

    pub fn symbols(&self) -> BTreeSet<Symbol> {
        self.terms.keys().flat_map(|m| m.symbols().iter().copied()).collect()
    }

    pub fn contains_symbol(&self, sym: Symbol) -> bool {
        self.terms.keys().any(|m| m.contains(sym))
    }

    fn accumulate(&mut self, mono: Monomial, coeff: i128) -> Result<(), ExprError> {
        if coeff == 0 {
            return Ok(());
        }
        let slot = self.terms.entry(mono).or_insert(0);
        *slot = slot.checked_add(coeff).ok_or(ExprError::Overflow)?;
        if *slot == 0 {
            self.terms.retain(|_, c| *c != 0);
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &SymbolicExpr) -> Result<SymbolicExpr, ExprError> {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.accumulate(m.clone(), *c)?;
        }
        Ok(out)
    }

    pub fn checked_neg(&self) -> Result<SymbolicExpr, ExprError> {
        self.checked_scale(-1)
    }

    pub fn checked_sub(&self, other: &SymbolicExpr) -> Result<SymbolicExpr, ExprError> {
        self.checked_add(&other.checked_neg()?)
    }

    pub fn checked_scale(&self, k: i128) -> Result<SymbolicExpr, ExprError> {
        if k == 0 {
            return Ok(SymbolicExpr::zero());
        }
        let mut terms = BTreeMap::new();
        for (m, c) in &self.terms {
            terms.insert(m.clone(), c.checked_mul(k).ok_or(ExprError::Overflow)?);
        }
        Ok(SymbolicExpr { terms })
    }

    pub fn checked_mul(&self, other: &SymbolicExpr) -> Result<SymbolicExpr, ExprError> {
        let mut out = SymbolicExpr::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let c = ca.checked_mul(*cb).ok_or(ExprError::Overflow)?;
                out.accumulate(ma.times(mb), c)?;
            }
        }
        Ok(out)
    }

    fn checked_pow(&self, exp: u32) -> Result<SymbolicExpr, ExprError> {
        let mut acc = SymbolicExpr::constant(1);
        for _ in 0..exp {
            acc = acc.checked_mul(self)?;
        }
        Ok(acc)
    }

    /// Replaces every occurrence of `sym` with `replacement`.
    pub fn substitute(&self, sym: Symbol, replacement: &SymbolicExpr) -> Result<SymbolicExpr, ExprError> {
        if !self.contains_symbol(sym) {
            return Ok(self.clone());
        }
        let mut out = SymbolicExpr::zero();
        for (m, c) in &self.terms {
            let (power, rest) = m.split(sym);
            if power == 0 {
                out.accumulate(rest, *c)?;
                continue;
            }
            let expanded = replacement
                .checked_pow(power)?
                .checked_mul(&SymbolicExpr::term(*c, rest))?;
            out = out.checked_add(&expanded)?;
        }
        Ok(out)
    }

    /// Applies a closed substitution map (right-hand sides mention no
    /// eliminated symbol), so a single pass reaches the fixpoint.
    pub fn substitute_all(&self, map: &BTreeMap<Symbol, SymbolicExpr>) -> Result<SymbolicExpr, ExprError> {
        let mut out = self.clone();
        for sym in self.symbols() {
            if let Some(rep) = map.get(&sym) {
                out = out.substitute(sym, rep)?;
            }
        }
        Ok(out)
    }

    pub fn canonicalize(&self, constraints: &ShapeConstraintGraph) -> Result<SymbolicExpr, ExprError> {
        constraints.canonicalize(self)
    }

    pub fn evaluate(&self, env: &Env) -> Result<i128, ExprError> {
        let mut total: i128 = 0;
        for (m, c) in &self.terms {
            let mut v = *c;
            for sym in m.symbols() {
                let x = *env.get(sym).ok_or(ExprError::UnboundSymbol(*sym))?;
                v = v.checked_mul(x as i128).ok_or(ExprError::Overflow)?;
            }
            total = total.checked_add(v).ok_or(ExprError::Overflow)?;
        }
        Ok(total)
    }

    /// Value with every symbol set to 1, i.e. the sum of coefficients.
    pub fn value_at_ones(&self) -> Result<i128, ExprError> {
        self.terms
            .values()
            .try_fold(0i128, |acc, c| acc.checked_add(*c).ok_or(ExprError::Overflow))
    }

    /// Divides every term by the largest monomial common to all of them.
    /// `e = 0` and the result `= 0` have the same solutions when every
    /// symbol is nonzero.
    pub fn without_common_factor(&self) -> SymbolicExpr {
        let count = |m: &Monomial| {
            let mut c: BTreeMap<Symbol, usize> = BTreeMap::new();
            for s in m.symbols() {
                *c.entry(*s).or_default() += 1;
            }
            c
        };
        let mut terms = self.terms.keys();
        let Some(first) = terms.next() else {
            return self.clone();
        };
        let mut common = count(first);
        for m in terms {
            let c = count(m);
            common = common
                .into_iter()
                .filter_map(|(s, n)| c.get(&s).map(|k| (s, n.min(*k))))
                .collect();
        }
        if common.is_empty() {
            return self.clone();
        }
        let terms = self
            .terms
            .iter()
            .map(|(m, c)| {
                let mut left = common.clone();
                let rest = m
                    .symbols()
                    .iter()
                    .copied()
                    .filter(|s| match left.get_mut(s) {
                        Some(n) if *n > 0 => {
                            *n -= 1;
                            false
                        }
                        _ => true,
                    })
                    .collect();
                (Monomial::from_symbols(rest), *c)
            })
            .collect();
        SymbolicExpr { terms }
    }

    /// Sign that holds for every assignment with all symbols `>= 1`, if one
    /// can be read off the coefficients.
    pub fn definite_sign(&self) -> Option<Ordering> {
        if self.is_zero() {
            return Some(Ordering::Equal);
        }
        let at_ones = self.value_at_ones().ok()?;
        if self.terms.values().all(|c| *c >= 0) && at_ones > 0 {
            Some(Ordering::Greater)
        } else if self.terms.values().all(|c| *c <= 0) && at_ones < 0 {
            Some(Ordering::Less)
        } else {
            None
        }
    }

    /// Renders with `@`-prefixed symbols, as used in IR text and constraint dumps.
    pub fn to_ir_string(&self) -> String {
        struct Ir<'a>(&'a SymbolicExpr);
        impl fmt::Display for Ir<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt_with(f, "@")
            }
        }
        Ir(self).to_string()
    }

    fn fmt_with(&self, f: &mut fmt::Formatter<'_>, prefix: &str) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (i, (m, c)) in self.terms.iter().enumerate() {
            let magnitude = c.unsigned_abs();
            match (i, *c < 0) {
                (0, false) => write!(f, "{magnitude}")?,
                (0, true) => write!(f, "-{magnitude}")?,
                (_, false) => write!(f, " + {magnitude}")?,
                (_, true) => write!(f, " - {magnitude}")?,
            }
            if !m.is_one() {
                f.write_str("*")?;
                m.fmt_with(f, prefix)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for SymbolicExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_with(f, "")
    }
}

impl From<Symbol> for SymbolicExpr {
    fn from(sym: Symbol) -> Self {
        SymbolicExpr::symbol(sym)
    }
}

/// Best-effort comparison of `a` and `b` under `constraints`.
///
/// The difference is rewritten onto the constraint basis; a definite answer
/// is returned only when the coefficient signs of the difference settle it
/// for every symbol assignment `>= 1`, or when the difference is a rational
/// multiple of a retained (unoriented) equality. Overflow yields `Unknown`.
pub fn compare(a: &SymbolicExpr, b: &SymbolicExpr, constraints: &ShapeConstraintGraph) -> CompareResult {
    let Ok(diff) = a.checked_sub(b).and_then(|d| constraints.canonicalize(&d)) else {
        return CompareResult::Unknown;
    };
    match diff.definite_sign() {
        Some(Ordering::Equal) => CompareResult::DefinitelyEqual,
        Some(Ordering::Greater) => CompareResult::DefinitelyGreater,
        Some(Ordering::Less) => CompareResult::DefinitelyLess,
        None if constraints.is_multiple_of_unoriented(&diff) => CompareResult::DefinitelyEqual,
        None => CompareResult::Unknown,
    }
}

/// Returns true when `a = q * b` for some nonzero rational `q`.
pub(crate) fn is_rational_multiple(a: &SymbolicExpr, b: &SymbolicExpr) -> bool {
    if a.terms.len() != b.terms.len() || b.is_zero() {
        return false;
    }
    let (m0, cb0) = b.terms.iter().next().expect("nonempty");
    let ca0 = a.coeff(m0);
    if ca0 == 0 {
        return false;
    }
    // a = (ca0 / cb0) * b  <=>  a_m * cb0 == b_m * ca0 for all m
    b.terms.iter().all(|(m, cb)| {
        let ca = a.coeff(m);
        match (ca.checked_mul(*cb0), cb.checked_mul(ca0)) {
            (Some(l), Some(r)) => ca != 0 && l == r,
            _ => false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const S0: Symbol = Symbol(0);
    const S1: Symbol = Symbol(1);

    fn lin(c: i128, s: Symbol) -> SymbolicExpr {
        SymbolicExpr::term(c, Monomial::from_symbols(vec![s]))
    }

    fn with_s0_eq_12_s1() -> ShapeConstraintGraph {
        ShapeConstraintGraph::from_substitutions([(S0, lin(12, S1))]).unwrap()
    }

    #[test]
    fn add_disjoint_monomials() {
        let e = lin(11008, S1).checked_add(&lin(1024, S0)).unwrap();
        assert_eq!(e.coeff(&Monomial::from_symbols(vec![S1])), 11008);
        assert_eq!(e.coeff(&Monomial::from_symbols(vec![S0])), 1024);
        assert_eq!(e.terms().count(), 2);
    }

    #[test]
    fn add_cancels_to_zero() {
        let e = lin(12, S1).checked_add(&lin(-12, S1)).unwrap();
        assert!(e.is_zero());
        assert_eq!(e, SymbolicExpr::zero());
        assert_eq!(e.to_string(), "0");
    }

    #[test]
    fn mul_by_constants() {
        let e = SymbolicExpr::symbol(S0)
            .checked_mul(&SymbolicExpr::constant(4096))
            .unwrap();
        assert_eq!(e, lin(4096, S0));
        let e = SymbolicExpr::symbol(S1)
            .checked_mul(&SymbolicExpr::constant(12))
            .unwrap()
            .checked_mul(&SymbolicExpr::constant(4096))
            .unwrap();
        assert_eq!(e, lin(49152, S1));
    }

    #[test]
    fn substitute_examples() {
        let rep = lin(12, S1);
        assert_eq!(lin(1024, S0).substitute(S0, &rep).unwrap(), lin(12288, S1));
        assert_eq!(lin(11008, S1).substitute(S0, &rep).unwrap(), lin(11008, S1));
        assert_eq!(lin(4096, S0).substitute(S0, &rep).unwrap(), lin(49152, S1));
    }

    #[test]
    fn substitute_expands_powers() {
        // (S0^2 + S0) with S0 -> S1 + 1  ==  S1^2 + 3*S1 + 2
        let s0 = SymbolicExpr::symbol(S0);
        let e = s0.checked_mul(&s0).unwrap().checked_add(&s0).unwrap();
        let rep = SymbolicExpr::symbol(S1)
            .checked_add(&SymbolicExpr::constant(1))
            .unwrap();
        let got = e.substitute(S0, &rep).unwrap();
        assert_eq!(got.to_string(), "1*S1^2 + 3*S1 + 2");
    }

    #[test]
    fn canonicalize_examples() {
        let cs = with_s0_eq_12_s1();
        assert_eq!(lin(1024, S0).canonicalize(&cs).unwrap(), lin(12288, S1));
        let e = lin(4096, S0).checked_sub(&lin(10996, S1)).unwrap();
        assert_eq!(e.canonicalize(&cs).unwrap(), lin(38156, S1));
        let e = lin(3, S0).checked_add(&SymbolicExpr::constant(5)).unwrap();
        assert_eq!(e.canonicalize(&ShapeConstraintGraph::default()).unwrap(), e);
    }

    #[test]
    fn compare_examples() {
        let cs = with_s0_eq_12_s1();
        assert_eq!(
            compare(&lin(11008, S1), &lin(1024, S0), &cs),
            CompareResult::DefinitelyLess
        );
        assert_eq!(
            compare(&lin(4096, S0), &lin(10996, S1), &cs),
            CompareResult::DefinitelyGreater
        );
        let a = lin(3, S0).checked_sub(&SymbolicExpr::symbol(S1)).unwrap();
        assert_eq!(
            compare(&a, &SymbolicExpr::symbol(S0), &ShapeConstraintGraph::default()),
            CompareResult::Unknown
        );
        assert_eq!(
            compare(&lin(12, S1), &SymbolicExpr::symbol(S0), &cs),
            CompareResult::DefinitelyEqual
        );
    }

    #[test]
    fn nonnegative_with_zero_at_ones_is_unknown() {
        // S0*S1 - S0 - S1 + 1 = (S0-1)(S1-1) >= 0 but 0 at ones: not strict.
        let s0 = SymbolicExpr::symbol(S0);
        let s1 = SymbolicExpr::symbol(S1);
        let d = s0
            .checked_mul(&s1)
            .unwrap()
            .checked_sub(&s0)
            .unwrap()
            .checked_sub(&s1)
            .unwrap()
            .checked_add(&SymbolicExpr::constant(1))
            .unwrap();
        assert_eq!(
            compare(&d, &SymbolicExpr::zero(), &ShapeConstraintGraph::default()),
            CompareResult::Unknown
        );
    }

    #[test]
    fn evaluate_examples() {
        let env: Env = [(S1, 3)].into();
        assert_eq!(lin(11008, S1).evaluate(&env).unwrap(), 33024);
        assert_eq!(SymbolicExpr::constant(7).evaluate(&Env::new()).unwrap(), 7);
        let a = lin(12288, S1).evaluate(&[(S1, 5)].into()).unwrap();
        let b = lin(1024, S0).evaluate(&[(S0, 60)].into()).unwrap();
        assert_eq!((a, b), (61440, 61440));
        assert_eq!(lin(2, S0).evaluate(&env), Err(ExprError::UnboundSymbol(S0)));
    }

    #[test]
    fn overflow_is_reported() {
        let big = SymbolicExpr::constant(i128::MAX);
        assert_eq!(big.checked_add(&SymbolicExpr::constant(1)), Err(ExprError::Overflow));
        assert_eq!(big.checked_mul(&SymbolicExpr::constant(2)), Err(ExprError::Overflow));
    }

    #[test]
    fn common_factor_is_divided_out() {
        let s0 = SymbolicExpr::symbol(Symbol(0));
        let s1 = SymbolicExpr::symbol(Symbol(1));
        // 2*S0^2 - S0*S1 -> 2*S0 - S1
        let e = s0
            .checked_mul(&s0)
            .unwrap()
            .checked_scale(2)
            .unwrap()
            .checked_sub(&s0.checked_mul(&s1).unwrap())
            .unwrap();
        assert_eq!(e.without_common_factor().to_string(), "2*S0 - 1*S1");
        let with_const = e.checked_add(&SymbolicExpr::constant(1)).unwrap();
        assert_eq!(with_const.without_common_factor(), with_const);
        assert!(SymbolicExpr::zero().without_common_factor().is_zero());
    }

    #[test]
    fn rendering() {
        let e = lin(12288, S1).checked_add(&SymbolicExpr::constant(7)).unwrap();
        assert_eq!(e.to_string(), "12288*S1 + 7");
        assert_eq!(lin(-11007, S1).to_string(), "-11007*S1");
        assert_eq!(lin(1, S1).to_string(), "1*S1");
        let e = lin(2, S0).checked_sub(&SymbolicExpr::symbol(S1)).unwrap();
        assert_eq!(e.to_string(), "2*S0 - 1*S1");
        assert_eq!(lin(12, S1).to_ir_string(), "12*@S1");
    }

    #[test]
    fn rational_multiples() {
        let a = lin(2, S0).checked_sub(&lin(3, S1)).unwrap();
        let b = lin(-4, S0).checked_add(&lin(6, S1)).unwrap();
        assert!(is_rational_multiple(&a, &b));
        assert!(!is_rational_multiple(&a, &lin(2, S0)));
    }
}
