//! Dense discrete factors over network variables.
//!
//! Values are stored row-major over `vars` (last variable fastest). The
//! variable list is always kept sorted by variable index so that products
//! and marginalizations can line up scopes without re-sorting.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Factor {
    pub vars: Vec<usize>,
    pub cards: Vec<usize>,
    pub values: Vec<f64>,
}

impl Factor {
    pub fn scalar(value: f64) -> Self {
        Factor {
            vars: Vec::new(),
            cards: Vec::new(),
            values: vec![value],
        }
    }

    /// Builds a factor from a scope given in arbitrary order, reordering the
    /// table so that the stored scope is sorted.
    pub fn from_unsorted(vars: &[usize], cards: &[usize], values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..vars.len()).collect();
        order.sort_by_key(|&k| vars[k]);
        let sorted_vars: Vec<usize> = order.iter().map(|&k| vars[k]).collect();
        let sorted_cards: Vec<usize> = order.iter().map(|&k| cards[k]).collect();
        let src_strides = strides(cards);
        let size = values.len();
        let mut out = vec![0.0; size];
        let mut assign = vec![0usize; vars.len()];
        for slot in out.iter_mut() {
            let mut src = 0;
            for (pos, &k) in order.iter().enumerate() {
                src += assign[pos] * src_strides[k];
            }
            *slot = values[src];
            increment(&mut assign, &sorted_cards);
        }
        Factor {
            vars: sorted_vars,
            cards: sorted_cards,
            values: out,
        }
    }

    fn stride_of(&self, var: usize) -> usize {
        match self.vars.iter().position(|&v| v == var) {
            Some(pos) => self.cards[pos + 1..].iter().product(),
            None => 0,
        }
    }

    /// Pointwise combination over the union scope.
    pub fn combine(&self, other: &Factor, op: impl Fn(f64, f64) -> f64) -> Factor {
        let mut vars: Vec<usize> = self.vars.iter().chain(other.vars.iter()).copied().collect();
        vars.sort_unstable();
        vars.dedup();
        let cards: Vec<usize> = vars
            .iter()
            .map(|v| {
                self.vars
                    .iter()
                    .position(|x| x == v)
                    .map(|p| self.cards[p])
                    .unwrap_or_else(|| other.cards[other.vars.iter().position(|x| x == v).unwrap()])
            })
            .collect();
        let sa: Vec<usize> = vars.iter().map(|&v| self.stride_of(v)).collect();
        let sb: Vec<usize> = vars.iter().map(|&v| other.stride_of(v)).collect();
        let size: usize = cards.iter().product();
        let mut values = Vec::with_capacity(size);
        let mut assign = vec![0usize; vars.len()];
        let (mut ia, mut ib) = (0usize, 0usize);
        for _ in 0..size {
            values.push(op(self.values[ia], other.values[ib]));
            // odometer step, keeping the two source offsets in sync
            for pos in (0..vars.len()).rev() {
                assign[pos] += 1;
                ia += sa[pos];
                ib += sb[pos];
                if assign[pos] < cards[pos] {
                    break;
                }
                ia -= sa[pos] * cards[pos];
                ib -= sb[pos] * cards[pos];
                assign[pos] = 0;
            }
        }
        Factor { vars, cards, values }
    }

    pub fn product(&self, other: &Factor) -> Factor {
        self.combine(other, |a, b| a * b)
    }

    /// Eliminates `var` with the given associative reduction.
    pub fn eliminate(&self, var: usize, reduce: impl Fn(f64, f64) -> f64) -> Factor {
        let Some(pos) = self.vars.iter().position(|&v| v == var) else {
            return self.clone();
        };
        let inner: usize = self.cards[pos + 1..].iter().product();
        let card = self.cards[pos];
        let outer: usize = self.cards[..pos].iter().product();
        let mut values = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * card * inner + i;
                let mut acc = self.values[base];
                for k in 1..card {
                    acc = reduce(acc, self.values[base + k * inner]);
                }
                values.push(acc);
            }
        }
        let mut vars = self.vars.clone();
        let mut cards = self.cards.clone();
        vars.remove(pos);
        cards.remove(pos);
        Factor { vars, cards, values }
    }

    pub fn sum_out(&self, var: usize) -> Factor {
        self.eliminate(var, |a, b| a + b)
    }

    /// Fixes `var` to `state`, dropping it from the scope.
    pub fn reduce(&self, var: usize, state: usize) -> Factor {
        let Some(pos) = self.vars.iter().position(|&v| v == var) else {
            return self.clone();
        };
        let inner: usize = self.cards[pos + 1..].iter().product();
        let card = self.cards[pos];
        let outer: usize = self.cards[..pos].iter().product();
        let mut values = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * card * inner + state * inner;
            values.extend_from_slice(&self.values[base..base + inner]);
        }
        let mut vars = self.vars.clone();
        let mut cards = self.cards.clone();
        vars.remove(pos);
        cards.remove(pos);
        Factor { vars, cards, values }
    }
}

pub(crate) fn strides(cards: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; cards.len()];
    for k in (0..cards.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * cards[k + 1];
    }
    s
}

/// Mixed-radix increment, last digit fastest. Returns false on wrap-around.
pub(crate) fn increment(assign: &mut [usize], cards: &[usize]) -> bool {
    for pos in (0..assign.len()).rev() {
        assign[pos] += 1;
        if assign[pos] < cards[pos] {
            return true;
        }
        assign[pos] = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_matches_pointwise_definition() {
        // f(a,b) over cards (2,3); g(b,c) over cards (3,2)
        let f = Factor {
            vars: vec![0, 1],
            cards: vec![2, 3],
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let g = Factor {
            vars: vec![1, 2],
            cards: vec![3, 2],
            values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        let h = f.product(&g);
        assert_eq!(h.vars, vec![0, 1, 2]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..2 {
                    let got = h.values[a * 6 + b * 2 + c];
                    let want = f.values[a * 3 + b] * g.values[b * 2 + c];
                    assert!((got - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn reorder_and_reduce() {
        // scope given as (2, 0) with cards (2, 3): value = 10*x2 + x0
        let mut vals = Vec::new();
        for x2 in 0..2 {
            for x0 in 0..3 {
                vals.push((10 * x2 + x0) as f64);
            }
        }
        let f = Factor::from_unsorted(&[2, 0], &[2, 3], &vals);
        assert_eq!(f.vars, vec![0, 2]);
        assert_eq!(f.values, vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
        let r = f.reduce(2, 1);
        assert_eq!(r.values, vec![10.0, 11.0, 12.0]);
        let s = f.sum_out(0);
        assert_eq!(s.values, vec![3.0, 33.0]);
    }
}
