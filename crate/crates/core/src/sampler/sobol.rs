//! Unscrambled Sobol sequence in Gray-code order.
//!
//! Direction numbers come from the bundled `new-joe-kuo-64.txt`, which holds the
//! first 64 dimensions of the Joe–Kuo `new-joe-kuo-6.21201` table. Columns are
//! tab separated: `d s a m_i`, where `d` is the dimension (1-based), `s` the
//! degree of the primitive polynomial, `a` its interior coefficients as an
//! integer and `m_i` the `s` initial direction integers. Dimension 1 is the van
//! der Corput sequence and has no row.

use std::sync::OnceLock;

use super::SamplerError;

const DIRECTION_TABLE: &str = include_str!("../../data/new-joe-kuo-64.txt");

/// Bits of precision per coordinate; also caps the index at `2^32 - 1`.
const BITS: usize = 32;

/// Largest supported dimension.
pub const MAX_DIMENSION: usize = 64;

fn directions() -> &'static [[u32; BITS]] {
    static TABLE: OnceLock<Vec<[u32; BITS]>> = OnceLock::new();
    TABLE.get_or_init(|| parse_directions(DIRECTION_TABLE))
}

fn parse_directions(text: &str) -> Vec<[u32; BITS]> {
    let mut table = Vec::with_capacity(MAX_DIMENSION);
    let mut first = [0u32; BITS];
    for (i, v) in first.iter_mut().enumerate() {
        *v = 1 << (BITS - 1 - i);
    }
    table.push(first);

    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let fields: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse().expect("direction table holds integers"))
            .collect();
        let (s, a) = (fields[1] as usize, fields[2]);
        let m = &fields[3..3 + s];
        let mut v = [0u32; BITS];
        for i in 0..BITS {
            v[i] = if i < s {
                m[i] << (BITS - 1 - i)
            } else {
                let mut x = v[i - s] ^ (v[i - s] >> s);
                for k in 1..s {
                    if (a >> (s - 1 - k)) & 1 == 1 {
                        x ^= v[i - k];
                    }
                }
                x
            };
        }
        table.push(v);
    }
    table
}

/// A position in a `dimension`-dimensional Sobol sequence.
///
/// The state is fully determined by `(dimension, index)`; [`SobolStream::seek`]
/// jumps to any index in O(dimension × bits).
#[derive(Clone, Debug)]
pub struct SobolStream {
    dimension: usize,
    index: u64,
    state: Vec<u32>,
}

impl SobolStream {
    pub fn new(dimension: usize, start: u64) -> Result<Self, SamplerError> {
        if dimension == 0 || dimension > MAX_DIMENSION {
            return Err(SamplerError::UnsupportedDimension(dimension));
        }
        let mut stream = Self {
            dimension,
            index: 0,
            state: vec![0; dimension],
        };
        stream.seek(start)?;
        Ok(stream)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Ordinal of the point the next call to [`next_point`](Self::next_point) returns.
    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn seek(&mut self, index: u64) -> Result<(), SamplerError> {
        if index >= 1 << BITS {
            return Err(SamplerError::IndexOverflow(index));
        }
        let gray = index ^ (index >> 1);
        let dirs = directions();
        for (d, x) in self.state.iter_mut().enumerate() {
            *x = (0..BITS)
                .filter(|b| (gray >> b) & 1 == 1)
                .fold(0, |acc, b| acc ^ dirs[d][b]);
        }
        self.index = index;
        Ok(())
    }

    /// Writes the current point into `out` and advances.
    pub fn next_into(&mut self, out: &mut [f64]) -> Result<(), SamplerError> {
        if self.index >= (1 << BITS) - 1 {
            return Err(SamplerError::IndexOverflow(self.index + 1));
        }
        for (o, &x) in out.iter_mut().zip(&self.state) {
            *o = x as f64 / (1u64 << BITS) as f64;
        }
        // gray(n) and gray(n + 1) differ in bit trailing_zeros(n + 1).
        let bit = (self.index + 1).trailing_zeros() as usize;
        let dirs = directions();
        for (d, x) in self.state.iter_mut().enumerate() {
            *x ^= dirs[d][bit];
        }
        self.index += 1;
        Ok(())
    }

    pub fn next_point(&mut self) -> Result<Vec<f64>, SamplerError> {
        let mut out = vec![0.0; self.dimension];
        self.next_into(&mut out)?;
        Ok(out)
    }
}

/// `n` consecutive Sobol points starting at index `skip`.
pub fn sobol_points(n: usize, dim: usize, skip: u64) -> Result<Vec<Vec<f64>>, SamplerError> {
    let mut stream = SobolStream::new(dim, skip)?;
    (0..n).map(|_| stream.next_point()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_64_dimensions() {
        assert_eq!(directions().len(), MAX_DIMENSION);
    }

    #[test]
    fn first_points() {
        let pts = sobol_points(4, 41, 0).unwrap();
        assert!(pts[0].iter().all(|&x| x == 0.0));
        assert!(pts[1].iter().all(|&x| x == 0.5));
        // Reference values from an independent unscrambled Sobol generator.
        assert_eq!(&pts[2][..6], &[0.75, 0.25, 0.25, 0.25, 0.75, 0.75]);
        assert_eq!(pts[2][40], 0.25);
        assert_eq!(&pts[3][..6], &[0.25, 0.75, 0.75, 0.75, 0.25, 0.25]);
    }

    #[test]
    fn points_match_reference_generator() {
        let expected_4_to_7 = [
            [0.375, 0.375, 0.625, 0.875, 0.375, 0.125],
            [0.875, 0.875, 0.125, 0.375, 0.875, 0.625],
            [0.625, 0.125, 0.875, 0.625, 0.625, 0.875],
            [0.125, 0.625, 0.375, 0.125, 0.125, 0.375],
        ];
        let last = [0.875, 0.375, 0.625, 0.125];
        let pts = sobol_points(4, 41, 4).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(&p[..6], &expected_4_to_7[i]);
            assert_eq!(p[40], last[i]);
        }

        let p = sobol_points(1, 41, 1000).unwrap().remove(0);
        let got = [p[0], p[1], p[10], p[20], p[40]];
        assert_eq!(got, [0.2197265625, 0.0966796875, 0.0849609375, 0.5224609375, 0.9130859375]);

        // Point 1024 is the first outside the 2^10 net; it is not near zero.
        let p = sobol_points(1, 41, 1024).unwrap().remove(0);
        let got: Vec<f64> = [0, 1, 2, 3, 4, 5, 40].iter().map(|&d| p[d] * 2048.0).collect();
        assert_eq!(got, [3.0, 771.0, 917.0, 997.0, 1141.0, 1729.0, 859.0]);

        let p = sobol_points(1, 64, 12345).unwrap().remove(0);
        let got = [p[0], p[5], p[33], p[49], p[63]];
        assert_eq!(
            got,
            [0.64093017578125, 0.05889892578125, 0.66131591796875, 0.61285400390625, 0.46563720703125]
        );
    }

    #[test]
    fn seek_matches_sequential() {
        let seq = sobol_points(300, 41, 0).unwrap();
        for start in [0u64, 1, 2, 7, 128, 255] {
            let jumped = sobol_points(3, 41, start).unwrap();
            for (k, p) in jumped.iter().enumerate() {
                assert_eq!(p, &seq[start as usize + k]);
            }
        }
    }

    #[test]
    fn unsupported_dimension() {
        assert!(matches!(SobolStream::new(65, 0), Err(SamplerError::UnsupportedDimension(65))));
        assert!(matches!(SobolStream::new(0, 0), Err(SamplerError::UnsupportedDimension(0))));
    }
}
