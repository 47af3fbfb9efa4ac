//! Words over the branch alphabet and cached traversal of the residual tree.
//!
//! A word addresses a node of the `m`-ary tree; its residual operator is the
//! root pushed through one weighted-residual update per letter. [`TreeCache`]
//! recomputes nodes on demand. The default cache keeps only the spine of the
//! most recent path (cheap, suited to sampling); an optional exhaustive memo
//! keeps every visited node and is guarded by a node budget.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, WrError};
use crate::operator::{dissipated, wr_update, CMatrix, ProjectionFamily, PsdOperator};

/// Hard ceiling on exhaustively materialized nodes.
pub const DEFAULT_NODE_BUDGET: u64 = 2_000_000;

/// A finite word over the alphabet `1..=m`, addressing a tree node. The empty
/// word is the root.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Word(Vec<u8>);

impl Word {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    /// Wraps raw one-based letters. Letters are checked against the family
    /// size when the word is used, not here.
    pub fn from_letters(letters: Vec<u8>) -> Self {
        Self(letters)
    }

    pub fn letters(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<u8> {
        self.0.last().copied()
    }

    pub fn child(&self, letter: u8) -> Self {
        let mut letters = self.0.clone();
        letters.push(letter);
        Self(letters)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Self(self.0[..self.0.len() - 1].to_vec()).into()
        }
    }

    pub fn prefix(&self, n: usize) -> Self {
        Self(self.0[..n.min(self.0.len())].to_vec())
    }

    pub fn push(&mut self, letter: u8) {
        self.0.push(letter);
    }

    /// Serializes with one-based letters: a bare digit string for alphabets
    /// up to 9, comma-separated numbers above that.
    pub fn display(&self, m: usize) -> String {
        if m <= 9 {
            self.0.iter().map(|l| (b'0' + l) as char).collect()
        } else {
            self.0
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
    }

    /// Parses the serialization produced by [`display`](Self::display).
    pub fn parse(s: &str, m: usize) -> Result<Self> {
        if s.is_empty() {
            return Ok(Self::root());
        }
        let letters: Vec<u8> = if m <= 9 {
            s.chars()
                .map(|ch| {
                    ch.to_digit(10)
                        .map(|d| d as u8)
                        .ok_or_else(|| WrError::InvalidConfig(format!("bad word character {ch:?}")))
                })
                .collect::<Result<_>>()?
        } else {
            s.split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<u8>()
                        .map_err(|_| WrError::InvalidConfig(format!("bad word token {tok:?}")))
                })
                .collect::<Result<_>>()?
        };
        for &l in &letters {
            if l == 0 || l as usize > m {
                return Err(WrError::InvalidLetter { letter: l, m });
            }
        }
        Ok(Self(letters))
    }
}

/// On-demand residual operators over the branch tree.
pub struct TreeCache {
    family: Arc<ProjectionFamily>,
    root: Arc<PsdOperator>,
    spine_word: Word,
    spine: Vec<Arc<PsdOperator>>,
    memo: Option<HashMap<Word, Arc<PsdOperator>>>,
    budget: u64,
}

impl TreeCache {
    pub fn new(root: PsdOperator, family: ProjectionFamily) -> Result<Self> {
        Self::from_arcs(Arc::new(root), Arc::new(family))
    }

    pub fn from_arcs(root: Arc<PsdOperator>, family: Arc<ProjectionFamily>) -> Result<Self> {
        if root.dim() != family.dim() {
            return Err(WrError::DimensionMismatch {
                expected: family.dim(),
                got: root.dim(),
            });
        }
        Ok(Self {
            family,
            root,
            spine_word: Word::root(),
            spine: Vec::new(),
            memo: None,
            budget: DEFAULT_NODE_BUDGET,
        })
    }

    /// Switches to an exhaustive memo that retains every visited node,
    /// subject to the node budget.
    pub fn with_exhaustive_memo(mut self) -> Self {
        self.memo = Some(HashMap::new());
        self
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn family(&self) -> &ProjectionFamily {
        &self.family
    }

    pub fn family_arc(&self) -> Arc<ProjectionFamily> {
        self.family.clone()
    }

    pub fn root(&self) -> &PsdOperator {
        &self.root
    }

    pub fn root_arc(&self) -> Arc<PsdOperator> {
        self.root.clone()
    }

    fn check_word(&self, w: &Word) -> Result<()> {
        let m = self.family.len();
        for &l in w.letters() {
            if l == 0 || l as usize > m {
                return Err(WrError::InvalidLetter { letter: l, m });
            }
        }
        Ok(())
    }

    fn apply(family: &ProjectionFamily, r: &PsdOperator, letter: u8) -> Result<PsdOperator> {
        wr_update(r, family.projection_for_letter(letter)?)
    }

    /// Residual operator at `w`.
    pub fn node_residual(&mut self, w: &Word) -> Result<Arc<PsdOperator>> {
        self.check_word(w)?;
        if self.memo.is_some() {
            self.residual_memo(w)
        } else {
            self.residual_spine(w)
        }
    }

    fn residual_spine(&mut self, w: &Word) -> Result<Arc<PsdOperator>> {
        let lcp = w
            .letters()
            .iter()
            .zip(self.spine_word.letters())
            .take_while(|(a, b)| a == b)
            .count();
        self.spine.truncate(lcp);
        self.spine_word = self.spine_word.prefix(lcp);
        for &letter in &w.letters()[lcp..] {
            let parent = self.spine.last().cloned().unwrap_or_else(|| self.root.clone());
            let child = Self::apply(&self.family, &parent, letter)?;
            self.spine.push(Arc::new(child));
            self.spine_word.push(letter);
        }
        Ok(if w.is_empty() {
            self.root.clone()
        } else {
            self.spine[w.len() - 1].clone()
        })
    }

    fn residual_memo(&mut self, w: &Word) -> Result<Arc<PsdOperator>> {
        let family = self.family.clone();
        let memo = self.memo.as_mut().expect("memo mode");
        let mut cur = self.root.clone();
        for k in 0..w.len() {
            let pref = w.prefix(k + 1);
            if let Some(hit) = memo.get(&pref) {
                cur = hit.clone();
                continue;
            }
            let requested = memo.len() as u128 + 1;
            if requested > self.budget as u128 {
                return Err(WrError::BudgetExceeded {
                    requested,
                    budget: self.budget,
                });
            }
            let child = Arc::new(Self::apply(&family, &cur, w.letters()[k])?);
            memo.insert(pref, child.clone());
            cur = child;
        }
        Ok(cur)
    }

    /// Dissipated operator attached to the last step into `w`; undefined at
    /// the root.
    pub fn node_dissipation(&mut self, w: &Word) -> Result<PsdOperator> {
        let last = w.last().ok_or(WrError::EmptyWord)?;
        let parent = self.node_residual(&w.parent().expect("nonempty word"))?;
        let family = self.family.clone();
        dissipated(&parent, family.projection_for_letter(last)?)
    }

    /// Dissipated operators of all `m` children of `w`, in letter order.
    pub fn child_dissipations(&mut self, w: &Word) -> Result<Vec<PsdOperator>> {
        let r = self.node_residual(w)?;
        let family = self.family.clone();
        (0..family.len())
            .map(|idx| dissipated(&r, family.projection(idx)))
            .collect()
    }

    /// Frobenius norm of `root - residual(w) - sum of dissipated terms along
    /// the path to w`; exact telescoping makes this rounding-level small.
    pub fn branch_telescoping_defect(&mut self, w: &Word) -> Result<f64> {
        let dim = self.root.dim();
        let mut acc = CMatrix::zeros(dim, dim);
        for k in 1..=w.len() {
            let d = self.node_dissipation(&w.prefix(k))?;
            acc += d.matrix();
        }
        let rn = self.node_residual(w)?;
        Ok((self.root.matrix() - rn.matrix() - acc).norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::RANK_TOL;
    use crate::random;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;

    fn coordinate_family(dim: usize, root: &PsdOperator) -> ProjectionFamily {
        let projections: Vec<CMatrix> = (0..dim)
            .map(|k| {
                CMatrix::from_fn(dim, dim, |i, j| {
                    if i == k && j == k {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
            })
            .collect();
        ProjectionFamily::for_root(projections, root, RANK_TOL).unwrap()
    }

    #[test]
    fn word_display_and_parse_round_trip() {
        let w = Word::from_letters(vec![1, 2, 1]);
        assert_eq!(w.display(2), "121");
        assert_eq!(Word::parse("121", 2).unwrap(), w);

        let wide = Word::from_letters(vec![1, 12, 3]);
        assert_eq!(wide.display(12), "1,12,3");
        assert_eq!(Word::parse("1,12,3", 12).unwrap(), wide);

        assert_eq!(Word::parse("", 2).unwrap(), Word::root());
        assert!(Word::parse("103", 3).is_err());
        assert!(Word::parse("14", 3).is_err());
        assert!(Word::parse("1,x", 12).is_err());
    }

    #[test]
    fn word_structure_helpers() {
        let w = Word::from_letters(vec![2, 1, 2]);
        assert_eq!(w.parent().unwrap(), Word::from_letters(vec![2, 1]));
        assert_eq!(w.prefix(1), Word::from_letters(vec![2]));
        assert_eq!(w.prefix(9), w);
        assert_eq!(w.child(1), Word::from_letters(vec![2, 1, 2, 1]));
        assert_eq!(w.last(), Some(2));
        assert!(Word::root().parent().is_none());
    }

    #[test]
    fn two_dim_identity_worked_values() {
        let root = PsdOperator::identity(2);
        let family = coordinate_family(2, &root);
        let mut cache = TreeCache::new(root, family).unwrap();

        // One step with P1 kills the first coordinate.
        let r1 = cache.node_residual(&Word::from_letters(vec![1])).unwrap();
        assert_abs_diff_eq!(r1.matrix()[(0, 0)].re, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r1.matrix()[(1, 1)].re, 1.0, epsilon = 1e-14);

        // The second step with P2 extinguishes the branch ...
        let r12 = cache.node_residual(&Word::from_letters(vec![1, 2])).unwrap();
        assert_abs_diff_eq!(r12.matrix().norm(), 0.0, epsilon = 1e-14);

        // ... while repeating P1 leaves the residual unchanged.
        let r11 = cache.node_residual(&Word::from_letters(vec![1, 1])).unwrap();
        assert_abs_diff_eq!((r11.matrix() - r1.matrix()).norm(), 0.0, epsilon = 1e-14);

        let d1 = cache.node_dissipation(&Word::from_letters(vec![1])).unwrap();
        assert_abs_diff_eq!(d1.matrix()[(0, 0)].re, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d1.trace(), 1.0, epsilon = 1e-14);

        let defect = cache
            .branch_telescoping_defect(&Word::from_letters(vec![1, 2]))
            .unwrap();
        assert_abs_diff_eq!(defect, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn memo_and_spine_agree_on_random_instance() {
        let mut rng = random::seeded_rng(42);
        let root = random::random_psd(&mut rng, 4, 4, 4.0).unwrap();
        let projections = random::random_subspace_split(&mut rng, 4, 2).unwrap();
        let family = ProjectionFamily::for_root(projections, &root, RANK_TOL).unwrap();

        let mut spine = TreeCache::new(root.clone(), family.clone()).unwrap();
        let mut memo = TreeCache::new(root, family).unwrap().with_exhaustive_memo();

        for letters in [vec![1], vec![2, 1], vec![1, 2, 1], vec![2], vec![1, 2]] {
            let w = Word::from_letters(letters);
            let a = spine.node_residual(&w).unwrap();
            let b = memo.node_residual(&w).unwrap();
            assert_eq!(a.matrix(), b.matrix());
        }
    }

    #[test]
    fn memo_budget_is_enforced() {
        let root = PsdOperator::identity(2);
        let family = coordinate_family(2, &root);
        let mut cache = TreeCache::new(root, family)
            .unwrap()
            .with_exhaustive_memo()
            .with_budget(2);
        assert!(cache.node_residual(&Word::from_letters(vec![1, 2])).is_ok());
        let err = cache
            .node_residual(&Word::from_letters(vec![2, 1, 1]))
            .unwrap_err();
        assert!(matches!(err, WrError::BudgetExceeded { .. }));
    }

    #[test]
    fn invalid_letters_and_root_dissipation_are_rejected() {
        let root = PsdOperator::identity(2);
        let family = coordinate_family(2, &root);
        let mut cache = TreeCache::new(root, family).unwrap();
        assert!(matches!(
            cache.node_residual(&Word::from_letters(vec![3])),
            Err(WrError::InvalidLetter { letter: 3, m: 2 })
        ));
        assert!(matches!(
            cache.node_dissipation(&Word::root()),
            Err(WrError::EmptyWord)
        ));
    }

    #[test]
    fn telescoping_defect_stays_small_on_random_branch() {
        let mut rng = random::seeded_rng(1234);
        let root = random::random_psd(&mut rng, 5, 5, 5.0).unwrap();
        let projections = random::random_subspace_split(&mut rng, 5, 3).unwrap();
        let family = ProjectionFamily::for_root(projections, &root, RANK_TOL).unwrap();
        let root_norm = root.matrix().norm();
        let mut cache = TreeCache::new(root, family).unwrap();

        let letters: Vec<u8> = (0..30).map(|k| (k % 3 + 1) as u8).collect();
        let defect = cache
            .branch_telescoping_defect(&Word::from_letters(letters))
            .unwrap();
        assert!(defect <= 1e-10 * root_norm, "defect {defect}");
    }
}
