//! The flat parameter vector ψ = (ω, θ, P0, γ) and its layout.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::experts::cnn::CnnLayout;
use crate::experts::PathLossParams;
use crate::grid::Position;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Omega,
    Theta,
    P0,
    Gamma,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Omega, Self::Theta, Self::P0, Self::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            Self::Omega => "omega",
            Self::Theta => "theta",
            Self::P0 => "p0",
            Self::Gamma => "gamma",
        }
    }
}

impl std::str::FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::config("param_group", format!("unknown group `{s}`")))
    }
}

/// Maps named parameter groups to flat index ranges. ω comes first,
/// followed by θ (2), P0 and γ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    omega_len: usize,
    named: Vec<(String, Range<usize>)>,
}

impl ParamLayout {
    pub fn new(cnn: &CnnLayout) -> Self {
        let mut named = cnn.groups();
        let n = cnn.total;
        named.push(("theta".into(), n..n + 2));
        named.push(("p0".into(), n + 2..n + 3));
        named.push(("gamma".into(), n + 3..n + 4));
        Self {
            omega_len: n,
            named,
        }
    }

    /// Layout with a single anonymous ω block.
    pub fn with_omega_len(n: usize) -> Self {
        let mut named = Vec::new();
        if n > 0 {
            named.push(("omega".into(), 0..n));
        }
        named.push(("theta".into(), n..n + 2));
        named.push(("p0".into(), n + 2..n + 3));
        named.push(("gamma".into(), n + 3..n + 4));
        Self {
            omega_len: n,
            named,
        }
    }

    pub fn omega_len(&self) -> usize {
        self.omega_len
    }

    pub fn total_dim(&self) -> usize {
        self.omega_len + 4
    }

    pub fn range(&self, group: ParamGroup) -> Range<usize> {
        let n = self.omega_len;
        match group {
            ParamGroup::Omega => 0..n,
            ParamGroup::Theta => n..n + 2,
            ParamGroup::P0 => n + 2..n + 3,
            ParamGroup::Gamma => n + 3..n + 4,
        }
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        let n = self.omega_len;
        match index {
            i if i < n => ParamGroup::Omega,
            i if i < n + 2 => ParamGroup::Theta,
            i if i == n + 2 => ParamGroup::P0,
            _ => ParamGroup::Gamma,
        }
    }

    /// Finest named group containing `index`, e.g. `omega.conv2.bias`.
    pub fn name_of(&self, index: usize) -> &str {
        self.named
            .iter()
            .find(|(_, r)| r.contains(&index))
            .map(|(n, _)| n.as_str())
            .unwrap_or("out-of-range")
    }

    pub fn named_groups(&self) -> &[(String, Range<usize>)] {
        &self.named
    }

    /// Sorted flat indices of every parameter not in `frozen`.
    pub fn free_indices(&self, frozen: &[ParamGroup]) -> Vec<usize> {
        (0..self.total_dim())
            .filter(|&i| !frozen.contains(&self.group_of(i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn from_parts(
        layout: Arc<ParamLayout>,
        omega: &[f64],
        theta: Position,
        p0: f64,
        gamma: f64,
    ) -> Result<Self> {
        if omega.len() != layout.omega_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} omega entries", layout.omega_len()),
                actual: omega.len().to_string(),
            });
        }
        let mut values = Vec::with_capacity(layout.total_dim());
        values.extend_from_slice(omega);
        values.extend([theta.row, theta.col, p0, gamma]);
        Ok(Self { layout, values })
    }

    pub fn from_flat(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", layout.total_dim()),
                actual: values.len().to_string(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn omega(&self) -> &[f64] {
        &self.values[..self.layout.omega_len()]
    }

    pub fn theta(&self) -> Position {
        let n = self.layout.omega_len();
        Position::new(self.values[n], self.values[n + 1])
    }

    pub fn p0(&self) -> f64 {
        self.values[self.layout.omega_len() + 2]
    }

    pub fn gamma(&self) -> f64 {
        self.values[self.layout.omega_len() + 3]
    }

    pub fn path_loss(&self) -> PathLossParams {
        PathLossParams::new(self.theta(), self.p0(), self.gamma())
    }

    /// Errors with the offending group when any entry is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.layout, &self.values)
    }
}

pub(crate) fn check_finite(layout: &ParamLayout, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(Error::NonFiniteParam {
            group: layout.name_of(index).to_string(),
            index,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::CnnArchitecture;
    use proptest::prelude::*;

    #[test]
    fn layout_ranges_partition_the_vector() {
        let arch = CnnArchitecture::compact();
        let layout = ParamLayout::new(&arch.layout());
        assert_eq!(layout.total_dim(), arch.param_count() + 4);
        let mut next = 0;
        for (_, r) in layout.named_groups() {
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, layout.total_dim());
        let n = layout.omega_len();
        assert_eq!(layout.name_of(n + 1), "theta");
        assert_eq!(layout.name_of(0), "omega.conv1.weight");
        assert_eq!(layout.group_of(n + 3), ParamGroup::Gamma);
        assert_eq!(
            layout.free_indices(&[ParamGroup::Omega]),
            vec![n, n + 1, n + 2, n + 3]
        );
    }

    #[test]
    fn non_finite_reports_group() {
        let layout = Arc::new(ParamLayout::with_omega_len(3));
        let psi = ParamVector::from_parts(
            layout,
            &[0.0, 1.0, 2.0],
            Position::new(1.0, f64::NAN),
            0.0,
            2.0,
        )
        .unwrap();
        match psi.check_finite() {
            Err(Error::NonFiniteParam { group, index }) => {
                assert_eq!(group, "theta");
                assert_eq!(index, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(
            omega in proptest::collection::vec(-10.0f64..10.0, 0..40),
            tr in -5.0f64..5.0, tc in -5.0f64..5.0, p0 in -30.0f64..30.0, g in 0.5f64..9.0,
        ) {
            let layout = Arc::new(ParamLayout::with_omega_len(omega.len()));
            let psi = ParamVector::from_parts(layout.clone(), &omega, Position::new(tr, tc), p0, g).unwrap();
            prop_assert_eq!(psi.len(), omega.len() + 4);
            let back = ParamVector::from_flat(layout, psi.clone().into_flat()).unwrap();
            prop_assert_eq!(back.omega(), &omega[..]);
            prop_assert_eq!(back.theta(), Position::new(tr, tc));
            prop_assert_eq!(back.p0(), p0);
            prop_assert_eq!(back.gamma(), g);
            prop_assert_eq!(back, psi);
        }
    }
}
