//! Convolution layer strings of the form `<C>c<K>p<P>s<S>`, e.g. `64c3p1s2`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::conv::conv_out_dim;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn new(channels: usize, kernel: usize, padding: usize, stride: usize) -> Self {
        LayerSpec {
            channels,
            kernel,
            padding,
            stride,
        }
    }

    /// Output `(H, W)` for an `(H, W)` input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_dim(h, self.kernel, self.stride, self.padding)?,
            conv_out_dim(w, self.kernel, self.stride, self.padding)?,
        ))
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}c{}p{}s{}",
            self.channels, self.kernel, self.padding, self.stride
        )
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_layer_spec(s)
    }
}

/// Parses one layer string. Error locations are 1-based character columns.
pub fn parse_layer_spec(s: &str) -> Result<LayerSpec> {
    let chars: Vec<char> = s.chars().collect();
    let mut pos = 0;
    let mut fields = [0usize; 4];
    for (i, tag) in ['c', 'p', 's', '\0'].into_iter().enumerate() {
        let start = pos;
        while pos < chars.len() && chars[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            let found = chars
                .get(pos)
                .map_or("end of input".to_string(), |c| format!("'{c}'"));
            return Err(Error::parse(
                format!("column {}", pos + 1),
                format!("expected a number in `{s}`, found {found}"),
            ));
        }
        let digits: String = chars[start..pos].iter().collect();
        fields[i] = digits.parse().map_err(|_| {
            Error::parse(
                format!("column {}", start + 1),
                format!("number `{digits}` is too large"),
            )
        })?;
        if tag == '\0' {
            break;
        }
        match chars.get(pos) {
            Some(&c) if c == tag => pos += 1,
            other => {
                let found = other.map_or("end of input".to_string(), |c| format!("'{c}'"));
                return Err(Error::parse(
                    format!("column {}", pos + 1),
                    format!("expected '{tag}' in `{s}`, found {found}"),
                ));
            }
        }
    }
    if pos != chars.len() {
        return Err(Error::parse(
            format!("column {}", pos + 1),
            format!("trailing characters in `{s}`"),
        ));
    }
    let [channels, kernel, padding, stride] = fields;
    for (name, v, col) in [
        ("channel count", channels, 1),
        ("kernel", kernel, 1),
        ("stride", stride, 1),
    ] {
        if v == 0 {
            return Err(Error::parse(
                format!("column {col}"),
                format!("{name} must be positive in `{s}`"),
            ));
        }
    }
    Ok(LayerSpec::new(channels, kernel, padding, stride))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_reference_string() {
        assert_eq!(
            parse_layer_spec("64c3p1s2").unwrap(),
            LayerSpec::new(64, 3, 1, 2)
        );
    }

    #[test]
    fn reports_position() {
        let err = parse_layer_spec("64x3").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("column 3") && msg.contains("expected 'c'"),
            "{msg}"
        );
        assert!(parse_layer_spec("64c3p1")
            .unwrap_err()
            .to_string()
            .contains("column 7"));
        assert!(parse_layer_spec("64c3p1s2x")
            .unwrap_err()
            .to_string()
            .contains("trailing"));
        assert!(parse_layer_spec("0c3p1s1").is_err());
        assert!(parse_layer_spec("").is_err());
    }

    proptest! {
        #[test]
        fn display_round_trips(c in 1usize..4096, k in 1usize..12, p in 0usize..6, s in 1usize..5) {
            let spec = LayerSpec::new(c, k, p, s);
            prop_assert_eq!(spec.to_string().parse::<LayerSpec>().unwrap(), spec);
        }

        #[test]
        fn arbitrary_text_never_panics(s in "\\PC{0,16}") {
            let _ = parse_layer_spec(&s);
        }
    }
}
