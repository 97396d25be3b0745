//! Element symbols for atomic numbers 1..=103 (H through Lr).

use crate::error::{Error, Result};

/// Highest atomic number the model embeds.
pub const MAX_Z: u8 = 103;

#[rustfmt::skip]
const SYMBOLS: [&str; MAX_Z as usize] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr",
];

/// Symbol for an atomic number, if it is in range.
pub fn symbol(z: u8) -> Option<&'static str> {
    if (1..=MAX_Z).contains(&z) {
        Some(SYMBOLS[z as usize - 1])
    } else {
        None
    }
}

/// Atomic number for a symbol (case-sensitive, e.g. "Na").
pub fn atomic_number(sym: &str) -> Result<u8> {
    SYMBOLS
        .iter()
        .position(|s| *s == sym)
        .map(|p| (p + 1) as u8)
        .ok_or_else(|| Error::UnknownElement(sym.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_every_z() {
        for z in 1..=MAX_Z {
            let sym = symbol(z).unwrap();
            assert_eq!(atomic_number(sym).unwrap(), z);
        }
        assert!(symbol(0).is_none());
        assert!(symbol(104).is_none());
    }

    #[test]
    fn known_anchors() {
        assert_eq!(atomic_number("H").unwrap(), 1);
        assert_eq!(atomic_number("Na").unwrap(), 11);
        assert_eq!(atomic_number("Cl").unwrap(), 17);
        assert_eq!(atomic_number("U").unwrap(), 92);
        assert_eq!(atomic_number("Lr").unwrap(), 103);
        assert!(atomic_number("Xx").is_err());
        assert!(atomic_number("na").is_err());
    }
}
