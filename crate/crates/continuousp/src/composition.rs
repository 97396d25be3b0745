//! Species multisets, reduction to the primitive stoichiometry, and integer
//! expansion back to species vectors in canonical order.

use std::collections::BTreeMap;

use crate::element::MAX_Z;
use crate::error::{Error, Result};

/// Multiset of species, keyed by atomic number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composition {
    counts: BTreeMap<u8, u32>,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Composition {
    pub fn from_species(species: &[u8]) -> Result<Self> {
        if species.is_empty() {
            return Err(Error::EmptySpecies);
        }
        let mut counts = BTreeMap::new();
        for (index, &z) in species.iter().enumerate() {
            if z == 0 || z > MAX_Z {
                return Err(Error::SpeciesOutOfRange {
                    index,
                    z: z as u32,
                    max: MAX_Z as u32,
                });
            }
            *counts.entry(z).or_insert(0) += 1;
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &BTreeMap<u8, u32> {
        &self.counts
    }

    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    /// Divides all counts by their gcd, returning the primitive composition
    /// and the multiplier j such that self = reduced * j.
    pub fn reduce(&self) -> (Composition, u32) {
        let g = self.counts.values().fold(0, |acc, &c| gcd(acc, c));
        let counts = self
            .counts
            .iter()
            .map(|(&z, &c)| (z, c / g))
            .collect();
        (Composition { counts }, g)
    }

    /// Species vector for `self` scaled by j, in canonical order: ascending
    /// atomic number, each species' copies grouped together.
    pub fn expand_species(&self, j: u32) -> Result<Vec<u8>> {
        if j == 0 {
            return Err(Error::InvalidMultiplier(j));
        }
        let mut out = Vec::with_capacity((self.total() * j) as usize);
        for (&z, &c) in &self.counts {
            out.extend(std::iter::repeat_n(z, (c * j) as usize));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reduces_and_expands() {
        // Na4 Cl4 reduces to NaCl with j = 4.
        let comp = Composition::from_species(&[17, 11, 17, 11, 11, 17, 11, 17]).unwrap();
        let (reduced, j) = comp.reduce();
        assert_eq!(j, 4);
        assert_eq!(reduced.expand_species(1).unwrap(), vec![11, 17]);
        assert_eq!(reduced.expand_species(2).unwrap(), vec![11, 11, 17, 17]);
        assert_eq!(reduced.expand_species(4).unwrap(), comp.expand_species(1).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Composition::from_species(&[]),
            Err(Error::EmptySpecies)
        ));
        assert!(matches!(
            Composition::from_species(&[11, 0]),
            Err(Error::SpeciesOutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            Composition::from_species(&[104]),
            Err(Error::SpeciesOutOfRange { .. })
        ));
        let c = Composition::from_species(&[1]).unwrap();
        assert!(matches!(
            c.expand_species(0),
            Err(Error::InvalidMultiplier(0))
        ));
    }

    proptest! {
        #[test]
        fn reduce_then_expand_restores_counts(
            species in proptest::collection::vec(1u8..=103, 1..24)
        ) {
            let comp = Composition::from_species(&species).unwrap();
            let (reduced, j) = comp.reduce();
            let expanded = Composition::from_species(&reduced.expand_species(j).unwrap()).unwrap();
            prop_assert_eq!(expanded, comp.clone());
            // Reduced composition has coprime counts.
            let g = reduced.counts().values().fold(0u32, |acc, &c| {
                if acc == 0 { c } else { super::gcd(acc, c) }
            });
            prop_assert_eq!(g, 1);
            // Canonical expansion order is sorted and grouped.
            let v = comp.expand_species(1).unwrap();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
