//! Simulation and classification toolkit for pulsed quantum light sources.
//!
//! The pipeline mirrors an extended Hanbury Brown–Twiss experiment in
//! software: a Monte-Carlo photon source feeds three virtual detectors
//! ([`source`]), the detector streams are condensed into a normalized
//! third-order correlation map ([`correlator`]), and the map is classified
//! into one of four photon classes either analytically ([`theory`]) or with
//! a small trained convolutional network ([`cnn`]). The [`dataset`], [`eval`]
//! and [`stream`] modules provide the labeled-corpus generator, the metric
//! harness, and a line-protocol service for quasi-real-time classification.

pub mod cnn;
pub mod correlator;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod render;
pub mod source;
pub mod stream;
pub mod theory;

pub use error::{Error, Result};

/// The four source categories the toolkit distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhotonClass {
    Coherent,
    Fock1,
    Fock2,
    Fock3,
}

impl PhotonClass {
    pub const ALL: [PhotonClass; 4] = [
        PhotonClass::Coherent,
        PhotonClass::Fock1,
        PhotonClass::Fock2,
        PhotonClass::Fock3,
    ];

    /// Stable index used for score vectors, confusion matrices and file labels.
    pub fn index(self) -> usize {
        match self {
            PhotonClass::Coherent => 0,
            PhotonClass::Fock1 => 1,
            PhotonClass::Fock2 => 2,
            PhotonClass::Fock3 => 3,
        }
    }

    pub fn from_index(index: usize) -> Option<PhotonClass> {
        PhotonClass::ALL.get(index).copied()
    }

    /// Fock class for a given photon number.
    pub fn fock(n: u8) -> Option<PhotonClass> {
        match n {
            1 => Some(PhotonClass::Fock1),
            2 => Some(PhotonClass::Fock2),
            3 => Some(PhotonClass::Fock3),
            _ => None,
        }
    }

    /// Short wire/report code: `COH`, `F1`, `F2`, `F3`.
    pub fn code(self) -> &'static str {
        match self {
            PhotonClass::Coherent => "COH",
            PhotonClass::Fock1 => "F1",
            PhotonClass::Fock2 => "F2",
            PhotonClass::Fock3 => "F3",
        }
    }

    pub fn from_code(code: &str) -> Option<PhotonClass> {
        match code {
            "COH" => Some(PhotonClass::Coherent),
            "F1" => Some(PhotonClass::Fock1),
            "F2" => Some(PhotonClass::Fock2),
            "F3" => Some(PhotonClass::Fock3),
            _ => None,
        }
    }
}

impl std::fmt::Display for PhotonClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}
