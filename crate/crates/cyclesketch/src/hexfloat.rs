//! Exact `f64` text encoding in C99 hex-float notation, e.g. `0x1.8p+1`.

const MANTISSA_BITS: u32 = 52;
const MANTISSA_MASK: u64 = (1 << MANTISSA_BITS) - 1;
const EXP_BIAS: i64 = 1023;

/// Canonical hex-float: shortest mantissa, `0x1.` for normals, `0x0.` with
/// exponent `-1022` for subnormals, `0x0p+0` for zero.
pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let biased = ((bits >> MANTISSA_BITS) & 0x7ff) as i64;
    let mantissa = bits & MANTISSA_MASK;
    if biased == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if biased == 0 { (0, 1 - EXP_BIAS) } else { (1, biased - EXP_BIAS) };
    let digits = format!("{mantissa:013x}");
    let digits = digits.trim_end_matches('0');
    let exp_sign = if exp < 0 { "-" } else { "+" };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{}", exp.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed hex float {0:?}")]
pub struct ParseError(pub String);

/// Parses the output of [`format`]. Accepts any mantissa length up to 13
/// hex digits and any exponent that lands in range without rounding.
pub fn parse(s: &str) -> Result<f64, ParseError> {
    let bad = || ParseError(s.to_string());
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (negative, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mant_text, exp_text) = rest.split_once('p').ok_or_else(bad)?;
    let (lead, frac) = match mant_text.split_once('.') {
        Some((l, f)) if !f.is_empty() => (l, f),
        Some(_) => return Err(bad()),
        None => (mant_text, ""),
    };
    let lead = match lead {
        "0" => 0u64,
        "1" => 1u64,
        _ => return Err(bad()),
    };
    if frac.len() > 13 || !frac.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
        return Err(bad());
    }
    if !(exp_text.starts_with('+') || exp_text.starts_with('-')) {
        return Err(bad());
    }
    let exp: i64 = exp_text.parse().map_err(|_| bad())?;
    let mut mantissa = 0u64;
    for (i, b) in frac.bytes().enumerate() {
        let d = (b as char).to_digit(16).ok_or_else(bad)? as u64;
        mantissa |= d << (4 * (12 - i));
    }
    let sign_bit = if negative { 1u64 << 63 } else { 0 };
    let magnitude = if lead == 1 {
        if !(1 - EXP_BIAS..=EXP_BIAS).contains(&exp) {
            return Err(bad());
        }
        (((exp + EXP_BIAS) as u64) << MANTISSA_BITS) | mantissa
    } else if mantissa == 0 {
        if exp != 0 {
            return Err(bad());
        }
        0
    } else {
        if exp != 1 - EXP_BIAS {
            return Err(bad());
        }
        mantissa
    };
    Ok(f64::from_bits(sign_bit | magnitude))
}

/// Serde adapters storing `f64` values as hex-float strings.
pub mod serde_f64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format(*x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let text = String::deserialize(d)?;
        super::parse(&text).map_err(D::Error::custom)
    }
}

pub mod serde_vec {
    use serde::{de::Error as _, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for x in xs {
            seq.serialize_element(&super::format(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let texts = Vec::<String>::deserialize(d)?;
        texts.iter().map(|t| super::parse(t).map_err(D::Error::custom)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        assert_eq!(format(1.0), "0x1p+0");
        assert_eq!(format(3.0), "0x1.8p+1");
        assert_eq!(format(-0.1), "-0x1.999999999999ap-4");
        assert_eq!(format(0.0), "0x0p+0");
        assert_eq!(format(-0.0), "-0x0p+0");
        assert_eq!(format(f64::MIN_POSITIVE), "0x1p-1022");
        assert_eq!(format(f64::from_bits(1)), "0x0.0000000000001p-1022");
        assert_eq!(format(f64::MAX), "0x1.fffffffffffffp+1023");
    }

    #[test]
    fn rejects_malformed_text() {
        for s in ["", "1.0", "0x2p+0", "0x1.p+0", "0x1.8p1", "0x1.8", "0x1.8p+1024", "0x0.8p+0", "0x1.G", "0x1.8Ap+0"] {
            assert!(parse(s).is_err(), "{s}");
        }
    }

    proptest! {
        #[test]
        fn round_trips_every_bit_pattern(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            let y = parse(&format(x)).unwrap();
            if x.is_nan() {
                prop_assert!(y.is_nan());
            } else {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
