//! Fault models and the random choice of what to corrupt.
//!
//! Each injection opportunity consumes exactly three words from its stream,
//! whether or not a fault lands: a Bernoulli draw, an element draw and a
//! payload draw (random bit index or random value).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::microops::MicroOpKind;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::stream::{bounded_from_word, unit_from_word, InjectionStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FaultError {
    #[error("bit index {bit} outside 0..{width}")]
    BitOutOfRange { bit: u32, width: u32 },
    #[error("element index {index} out of range for a tensor of {len} elements")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("operation-wise injection needs at least one target operation kind")]
    NoTargetKinds,
    #[error("target layer {index} out of range for a model with {count} layers")]
    LayerOutOfRange { index: usize, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "bit")]
pub enum FaultKind {
    /// Set the element to +0.0.
    Zero,
    /// Replace the element with a uniformly random bit pattern (NaN and
    /// infinities included).
    RandomValue,
    BitFlipRandom,
    BitFlipSpecific(u32),
}

impl FaultKind {
    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Zero => "zero",
            FaultKind::RandomValue => "random_value",
            FaultKind::BitFlipRandom => "bit_flip_random",
            FaultKind::BitFlipSpecific(_) => "bit_flip_specific",
        }
    }

    pub fn validate<T: Scalar>(self) -> Result<(), FaultError> {
        match self {
            FaultKind::BitFlipSpecific(bit) if bit >= T::BITS => Err(FaultError::BitOutOfRange { bit, width: T::BITS }),
            _ => Ok(()),
        }
    }
}

/// Inverts bit `bit` (0 = least significant mantissa bit) of `value`.
///
/// # Panics
/// If `bit >= T::BITS`.
#[inline]
pub fn flip_bit<T: Scalar>(value: T, bit: u32) -> T {
    assert!(bit < T::BITS, "bit {bit} outside 0..{}", T::BITS);
    T::from_word(value.to_word() ^ (1u64 << bit))
}

/// What a single fault did to one element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub element: usize,
    /// Flipped bit, `None` for value replacement faults.
    pub bit: Option<u32>,
    pub original: u64,
    pub corrupted: u64,
}

impl Corruption {
    pub fn changed(&self) -> bool {
        self.original != self.corrupted
    }

    /// Writes the corrupted word back into `tensor`.
    pub fn replay<T: Scalar>(&self, tensor: &mut Tensor<T>) -> Result<(), FaultError> {
        let len = tensor.len();
        let slot = tensor
            .data_mut()
            .get_mut(self.element)
            .ok_or(FaultError::IndexOutOfRange {
                index: self.element,
                len,
            })?;
        *slot = T::from_word(self.corrupted);
        Ok(())
    }
}

/// A fault that will land: the element and the payload word that selects
/// the bit or value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedFault {
    pub element: usize,
    pub payload: u64,
}

/// Draws the Bernoulli, element and payload words for one opportunity on a
/// tensor of `len` elements.
pub fn plan_injection(stream: &mut InjectionStream, probability: f64, len: usize) -> Option<PlannedFault> {
    let gate = unit_from_word(stream.next_word());
    let element = bounded_from_word(stream.next_word(), len as u64) as usize;
    let payload = stream.next_word();
    (gate < probability).then_some(PlannedFault { element, payload })
}

fn apply_payload<T: Scalar>(tensor: &mut Tensor<T>, element: usize, kind: FaultKind, payload: u64) -> Corruption {
    let slot = &mut tensor.data_mut()[element];
    let original = slot.to_word();
    let (bit, corrupted) = match kind {
        FaultKind::Zero => (None, T::zero().to_word()),
        FaultKind::RandomValue => (None, payload & T::word_mask()),
        FaultKind::BitFlipRandom => {
            let bit = bounded_from_word(payload, u64::from(T::BITS)) as u32;
            (Some(bit), original ^ (1u64 << bit))
        }
        FaultKind::BitFlipSpecific(bit) => (Some(bit), flip_bit(*slot, bit).to_word()),
    };
    *slot = T::from_word(corrupted);
    Corruption {
        element,
        bit,
        original,
        corrupted,
    }
}

/// Applies a planned fault in place.
pub fn apply_planned<T: Scalar>(tensor: &mut Tensor<T>, plan: PlannedFault, kind: FaultKind) -> Corruption {
    apply_payload(tensor, plan.element, kind, plan.payload)
}

/// Corrupts element `index` according to `kind`, drawing one payload word.
pub fn corrupt_element<T: Scalar>(
    tensor: &mut Tensor<T>,
    index: usize,
    kind: FaultKind,
    stream: &mut InjectionStream,
) -> Result<Corruption, FaultError> {
    kind.validate::<T>()?;
    if index >= tensor.len() {
        return Err(FaultError::IndexOutOfRange {
            index,
            len: tensor.len(),
        });
    }
    let payload = stream.next_word();
    Ok(apply_payload(tensor, index, kind, payload))
}

/// With probability `spec.probability`, corrupts one uniformly chosen
/// element of `tensor`. Never touches more than one element.
pub fn maybe_inject<T: Scalar>(tensor: &mut Tensor<T>, spec: &FaultSpec, stream: &mut InjectionStream) -> Option<Corruption> {
    plan_injection(stream, spec.probability, tensor.len()).map(|plan| apply_planned(tensor, plan, spec.kind))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionTarget {
    /// Every execution of an op of these kinds (operation-wise).
    Operations(BTreeSet<MicroOpKind>),
    /// The output of one layer (layer-wise).
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub target: InjectionTarget,
    pub kind: FaultKind,
    pub probability: f64,
    pub seed: u64,
}

impl FaultSpec {
    pub fn new(target: InjectionTarget, kind: FaultKind, probability: f64, seed: u64) -> Result<Self, FaultError> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(FaultError::Probability(probability));
        }
        if let InjectionTarget::Operations(kinds) = &target {
            if kinds.is_empty() {
                return Err(FaultError::NoTargetKinds);
            }
        }
        if let FaultKind::BitFlipSpecific(bit) = kind {
            if bit >= 64 {
                return Err(FaultError::BitOutOfRange { bit, width: 64 });
            }
        }
        Ok(Self {
            target,
            kind,
            probability,
            seed,
        })
    }

    pub fn layer_wise(layer: usize, kind: FaultKind, probability: f64, seed: u64) -> Result<Self, FaultError> {
        Self::new(InjectionTarget::Layer(layer), kind, probability, seed)
    }

    pub fn operation_wise(
        kinds: impl IntoIterator<Item = MicroOpKind>,
        kind: FaultKind,
        probability: f64,
        seed: u64,
    ) -> Result<Self, FaultError> {
        Self::new(InjectionTarget::Operations(kinds.into_iter().collect()), kind, probability, seed)
    }

    /// Checks the parts that depend on the model: bit width and layer index.
    pub fn validate_for<T: Scalar>(&self, model: &Model<T>) -> Result<(), FaultError> {
        self.kind.validate::<T>()?;
        if let InjectionTarget::Layer(index) = self.target {
            if index >= model.layer_count() {
                return Err(FaultError::LayerOutOfRange {
                    index,
                    count: model.layer_count(),
                });
            }
        }
        Ok(())
    }

    /// Short hex digest of the canonical JSON form, used as provenance.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("FaultSpec serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Audit entry for one fault that landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub trial: u64,
    pub sample: u64,
    /// Layer index (layer-wise) or op instance id (operation-wise).
    pub site: u64,
    pub corruption: Corruption,
    /// Word width in bits, for formatting.
    pub width: u32,
}

impl InjectionRecord {
    pub const CSV_HEADER: &'static str = "trial,sample,site,element,bit,original_hex,corrupted_hex";

    /// `trial,sample,site,element,bit,original_hex,corrupted_hex`; the bit
    /// column is `-` for value replacement faults.
    pub fn csv_row(&self) -> String {
        let digits = (self.width / 4) as usize;
        let bit = self.corruption.bit.map_or_else(|| "-".to_string(), |b| b.to_string());
        format!(
            "{},{},{},{},{},0x{:0w$x},0x{:0w$x}",
            self.trial,
            self.sample,
            self.site,
            self.corruption.element,
            bit,
            self.corruption.original,
            self.corruption.corrupted,
            w = digits
        )
    }
}
