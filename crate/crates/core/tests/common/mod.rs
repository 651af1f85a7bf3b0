//! Helpers shared by the integration test targets.

use std::fs;
use std::path::PathBuf;

use ntc_core::codec::{range_decode, range_encode, FixedPointPmf, PROB_TOTAL};

/// Numerical Recipes LCG; symbols come from the top bits.
pub struct Lcg(pub u32);

impl Lcg {
    pub fn next(&mut self) -> u32 {
        self.0 = self.0.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
        self.0
    }

    /// Symbol drawn with probability proportional to `freqs`.
    pub fn draw(&mut self, pmf: &FixedPointPmf) -> i64 {
        let target = self.next() >> 16;
        let mut acc = 0u32;
        for (i, f) in pmf.frequencies().iter().enumerate() {
            acc += f;
            if target < acc {
                return pmf.lo() + i as i64;
            }
        }
        unreachable!("frequencies sum to the total")
    }
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::new();
    for line in bytes.chunks(32) {
        s.extend(line.iter().map(|b| format!("{b:02x}")));
        s.push('\n');
    }
    s
}

/// Encodes `symbols`, checks the decode, and compares the stream with the
/// fixture `name` (rewritten first when `NTC_WRITE_GOLDEN` is set).
pub fn check_golden(name: &str, symbols: &[i64], pmfs: &[&FixedPointPmf]) -> Result<(), String> {
    let stream = range_encode(symbols, pmfs).map_err(|e| e.to_string())?;
    if range_decode(&stream, pmfs).map_err(|e| e.to_string())? != symbols {
        return Err(format!("{name}: decode differs"));
    }
    let text = hex(&stream.bytes);
    let path = fixture(name);
    if std::env::var_os("NTC_WRITE_GOLDEN").is_some() {
        fs::write(&path, &text).map_err(|e| e.to_string())?;
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if text != expected {
        return Err(format!("bitstream differs from {name}"));
    }
    Ok(())
}

pub fn skewed() -> FixedPointPmf {
    // 40000 + 12000 + 9000 + 4000 + 536 = 65536
    FixedPointPmf::from_frequencies(-2, vec![40000, 12000, 9000, 4000, 536]).unwrap()
}


/// 2000 draws from one skewed table.
pub fn golden_skewed() -> Result<(), String> {
    let pmf = skewed();
    let mut lcg = Lcg(12345);
    let symbols: Vec<i64> = (0..2000).map(|_| lcg.draw(&pmf)).collect();
    let pmfs = vec![&pmf; symbols.len()];
    check_golden("skewed_2000.hex", &symbols, &pmfs)
}

/// 3000 draws cycling through a skewed, a wide and a uniform table.
pub fn golden_alternating() -> Result<(), String> {
    let a = skewed();
    let mut wide = vec![1u32; 300];
    wide[150] = PROB_TOTAL - 299;
    let b = FixedPointPmf::from_frequencies(-150, wide).unwrap();
    let uniform = FixedPointPmf::from_frequencies(0, vec![PROB_TOTAL / 8; 8]).unwrap();
    let tables = [&a, &b, &uniform];
    let mut lcg = Lcg(777);
    let pmfs: Vec<&FixedPointPmf> = (0..3000).map(|i| tables[i % 3]).collect();
    let symbols: Vec<i64> = pmfs.iter().map(|p| lcg.draw(p)).collect();
    if !symbols.iter().any(|&s| s != 0 && (-150..150).contains(&s) && s.abs() > 3) {
        return Err("no rare symbols drawn".into());
    }
    check_golden("alternating_3000.hex", &symbols, &pmfs)
}

/// 200 symbols that each carry a count of one.
pub fn golden_rare() -> Result<(), String> {
    let mut freqs = vec![1u32; 64];
    freqs[0] = PROB_TOTAL - 63;
    let pmf = FixedPointPmf::from_frequencies(0, freqs).unwrap();
    let symbols: Vec<i64> = (0..200).map(|i| 1 + (i * 7) % 63).collect();
    let pmfs = vec![&pmf; symbols.len()];
    check_golden("rare_200.hex", &symbols, &pmfs)
}
