//! Scalar element types the engine can run on.
//!
//! Every activation is a fixed-width IEEE-754 word, so besides the usual
//! arithmetic the trait exposes the raw bit pattern. That is what the fault
//! models corrupt.

use std::fmt::{Debug, Display, LowerExp};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// IEEE-754 binary floating point type usable as a tensor element.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Width of the storage word in bits.
    const BITS: u32;
    /// Short dtype tag written into cache manifests.
    const DTYPE: &'static str;

    /// Raw bit pattern, zero-extended to 64 bits.
    fn to_word(self) -> u64;

    /// Rebuilds a value from the low `BITS` bits of `word`.
    fn from_word(word: u64) -> Self;

    /// Number of bytes per element in serialized form.
    fn byte_width() -> usize {
        (Self::BITS / 8) as usize
    }

    /// Mask selecting the meaningful bits of a word.
    fn word_mask() -> u64 {
        if Self::BITS == 64 {
            u64::MAX
        } else {
            (1u64 << Self::BITS) - 1
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        let bytes = self.to_word().to_le_bytes();
        out.extend_from_slice(&bytes[..Self::byte_width()]);
    }

    /// Reads one element from the first `byte_width()` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self {
        let mut word = [0u8; 8];
        let width = Self::byte_width();
        word[..width].copy_from_slice(&bytes[..width]);
        Self::from_word(u64::from_le_bytes(word))
    }

    /// Converts through `f64`. Used for casting models between precisions.
    fn cast_from<U: Scalar>(value: U) -> Self {
        Self::from_f64(value.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    const DTYPE: &'static str = "f32";

    #[inline]
    fn to_word(self) -> u64 {
        u64::from(self.to_bits())
    }

    #[inline]
    fn from_word(word: u64) -> Self {
        f32::from_bits(word as u32)
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    const DTYPE: &'static str = "f64";

    #[inline]
    fn to_word(self) -> u64 {
        self.to_bits()
    }

    #[inline]
    fn from_word(word: u64) -> Self {
        f64::from_bits(word)
    }
}
