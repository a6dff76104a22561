//! Patch-correlation statistics over label masks and analytic FLOPs
//! estimation for the attention variants.

use crate::error::{OrdError, Result};
use crate::losses::LabelMask;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Sentinel for entries with no contributing pixel pairs.
pub const UNDEFINED: f64 = -1.0;

/// P^2 x P^2 inter/intra-patch correlations, patches ordered row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    p: usize,
    data: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn grid(&self) -> usize {
        self.p
    }

    pub fn side(&self) -> usize {
        self.p * self.p
    }

    pub fn at(&self, m: usize, n: usize) -> f64 {
        self.data[m * self.side() + n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mean of defined diagonal entries.
    pub fn diagonal_mean(&self) -> f64 {
        let vals: Vec<f64> = (0..self.side())
            .map(|m| self.at(m, m))
            .filter(|&v| v != UNDEFINED)
            .collect();
        mean(&vals)
    }

    /// Mean of defined off-diagonal entries.
    pub fn off_diagonal_mean(&self) -> f64 {
        let mut vals = Vec::new();
        for m in 0..self.side() {
            for n in 0..self.side() {
                if m != n && self.at(m, n) != UNDEFINED {
                    vals.push(self.at(m, n));
                }
            }
        }
        mean(&vals)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for m in 0..self.side() {
            let row: Vec<String> = (0..self.side())
                .map(|n| format!("{}", self.at(m, n)))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn max_abs_diff(&self, other: &CorrelationMatrix) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn mean(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Per-patch label histograms over a mask, truncating edge remainders when P
/// does not divide the extents. Ignored pixels are excluded.
fn patch_histograms(mask: &LabelMask, p: usize) -> Result<Vec<Vec<(u16, usize)>>> {
    if p == 0 {
        return Err(OrdError::Argument("patch grid P must be >= 1".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let (ph, pw) = (h / p, w / p);
    if ph == 0 || pw == 0 {
        return Err(OrdError::Partition(format!(
            "mask {}x{} too small for {}x{} grid",
            h, w, p, p
        )));
    }
    let mut hists: Vec<std::collections::BTreeMap<u16, usize>> =
        vec![Default::default(); p * p];
    for pr in 0..p {
        for pc in 0..p {
            let hist = &mut hists[pr * p + pc];
            for i in pr * ph..(pr + 1) * ph {
                for j in pc * pw..(pc + 1) * pw {
                    if !mask.is_ignored(i, j) {
                        *hist.entry(mask.at(i, j)).or_insert(0) += 1;
                    }
                }
            }
        }
    }
    Ok(hists
        .into_iter()
        .map(|h| h.into_iter().collect())
        .collect())
}

/// Patch correlation via the histogram fast path: the all-pairs label
/// similarity sum reduces to an inner product of per-patch histograms.
pub fn patch_correlation(mask: &LabelMask, p: usize) -> Result<CorrelationMatrix> {
    let hists = patch_histograms(mask, p)?;
    let side = p * p;
    let mut data = vec![UNDEFINED; side * side];
    for m in 0..side {
        let om: usize = hists[m].iter().map(|&(_, c)| c).sum();
        for n in 0..side {
            let on: usize = hists[n].iter().map(|&(_, c)| c).sum();
            if om == 0 || on == 0 {
                continue;
            }
            let mut matches = 0usize;
            let mut ai = 0;
            let mut bi = 0;
            while ai < hists[m].len() && bi < hists[n].len() {
                match hists[m][ai].0.cmp(&hists[n][bi].0) {
                    std::cmp::Ordering::Less => ai += 1,
                    std::cmp::Ordering::Greater => bi += 1,
                    std::cmp::Ordering::Equal => {
                        matches += hists[m][ai].1 * hists[n][bi].1;
                        ai += 1;
                        bi += 1;
                    }
                }
            }
            data[m * side + n] = matches as f64 / (om * on) as f64;
        }
    }
    Ok(CorrelationMatrix { p, data })
}

/// O(n^2) pair-enumeration reference for [`patch_correlation`].
pub fn patch_correlation_oracle(mask: &LabelMask, p: usize) -> Result<CorrelationMatrix> {
    if p == 0 {
        return Err(OrdError::Argument("patch grid P must be >= 1".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let (ph, pw) = (h / p, w / p);
    if ph == 0 || pw == 0 {
        return Err(OrdError::Partition(format!(
            "mask {}x{} too small for {}x{} grid",
            h, w, p, p
        )));
    }
    let side = p * p;
    // valid positions per patch
    let mut omega: Vec<Vec<u16>> = vec![Vec::new(); side];
    for pr in 0..p {
        for pc in 0..p {
            for i in pr * ph..(pr + 1) * ph {
                for j in pc * pw..(pc + 1) * pw {
                    if !mask.is_ignored(i, j) {
                        omega[pr * p + pc].push(mask.at(i, j));
                    }
                }
            }
        }
    }
    let mut data = vec![UNDEFINED; side * side];
    for m in 0..side {
        for n in 0..side {
            if omega[m].is_empty() || omega[n].is_empty() {
                continue;
            }
            let mut sum = 0usize;
            for &li in &omega[m] {
                for &lj in &omega[n] {
                    if li == lj {
                        sum += 1;
                    }
                }
            }
            data[m * side + n] = sum as f64 / (omega[m].len() * omega[n].len()) as f64;
        }
    }
    Ok(CorrelationMatrix { p, data })
}

/// Pixel-pair-weighted mean of per-mask correlation matrices. Each entry is
/// weighted by its number of contributing pixel pairs, so masks may be
/// streamed and merged in any order.
pub fn aggregate_correlation<'a>(
    masks: impl IntoIterator<Item = &'a LabelMask>,
    p: usize,
) -> Result<CorrelationMatrix> {
    let side = p * p;
    let mut num = vec![0.0; side * side];
    let mut den = vec![0.0; side * side];
    for mask in masks {
        let hists = patch_histograms(mask, p)?;
        let corr = patch_correlation(mask, p)?;
        let sizes: Vec<usize> = hists
            .iter()
            .map(|h| h.iter().map(|&(_, c)| c).sum())
            .collect();
        for m in 0..side {
            for n in 0..side {
                let pairs = (sizes[m] * sizes[n]) as f64;
                if pairs > 0.0 {
                    num[m * side + n] += corr.at(m, n) * pairs;
                    den[m * side + n] += pairs;
                }
            }
        }
    }
    let data = num
        .iter()
        .zip(den.iter())
        .map(|(&s, &d)| if d > 0.0 { s / d } else { UNDEFINED })
        .collect();
    Ok(CorrelationMatrix { p, data })
}

/// Analytic multiply-add counts for one attention module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub projections: u128,
    pub attention_product: u128,
    pub aggregation: u128,
    pub total: u128,
}

/// Closed-form counts for a patched attention module:
/// projections scale with HW * C * (Cq + Ck + Cv), the attention-map product
/// and aggregation with (HW)^2 / P^2.
#[allow(clippy::too_many_arguments)]
pub fn flops_estimate(
    h: usize,
    w: usize,
    c: usize,
    cq: usize,
    ck: usize,
    cv: usize,
    p: usize,
) -> Result<FlopsReport> {
    if h == 0 || w == 0 || c == 0 || cq == 0 || ck == 0 || cv == 0 || p == 0 {
        return Err(OrdError::Argument("flops_estimate dims must be positive".into()));
    }
    if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(OrdError::Argument(format!(
            "grid {} must divide {}x{}",
            p, h, w
        )));
    }
    let hw = (h * w) as u128;
    let hw_patch = ((h / p) * (w / p)) as u128;
    let patches = (p * p) as u128;
    let projections = hw * c as u128 * (cq + ck + cv) as u128;
    let attention_product = patches * hw_patch * hw_patch * ck as u128;
    let aggregation = patches * hw_patch * hw_patch * cv as u128;
    let total = projections + attention_product + aggregation;
    Ok(FlopsReport {
        projections,
        attention_product,
        aggregation,
        total,
    })
}

/// Read an 8-bit or 16-bit binary PGM (P5) file as a label mask.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMask> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_fields = Vec::new();
    let mut line = String::new();
    while header_fields.len() < 4 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(OrdError::Format("truncated PGM header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        header_fields.extend(content.split_whitespace().map(str::to_string));
    }
    if header_fields[0] != "P5" {
        return Err(OrdError::Format(format!(
            "expected P5 magic, got {}",
            header_fields[0]
        )));
    }
    let w: usize = header_fields[1]
        .parse()
        .map_err(|_| OrdError::Format("bad PGM width".into()))?;
    let h: usize = header_fields[2]
        .parse()
        .map_err(|_| OrdError::Format("bad PGM height".into()))?;
    let maxval: usize = header_fields[3]
        .parse()
        .map_err(|_| OrdError::Format("bad PGM maxval".into()))?;
    let mut labels = Vec::with_capacity(h * w);
    if maxval < 256 {
        let mut buf = vec![0u8; h * w];
        reader.read_exact(&mut buf)?;
        labels.extend(buf.into_iter().map(u16::from));
    } else if maxval < 65536 {
        let mut buf = vec![0u8; h * w * 2];
        reader.read_exact(&mut buf)?;
        // big-endian per the netpbm spec
        labels.extend(
            buf.chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]])),
        );
    } else {
        return Err(OrdError::Format(format!("PGM maxval {} too large", maxval)));
    }
    LabelMask::new(h, w, labels)
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    let maxval = mask.labels().iter().copied().max().unwrap_or(0).max(1);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n{}\n", mask.width(), mask.height(), maxval)?;
    if maxval < 256 {
        let bytes: Vec<u8> = mask.labels().iter().map(|&l| l as u8).collect();
        f.write_all(&bytes)?;
    } else {
        for &l in mask.labels() {
            f.write_all(&l.to_be_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_label_mask_is_all_ones() {
        let mask = LabelMask::new(4, 4, vec![2; 16]).unwrap();
        let corr = patch_correlation(&mask, 2).unwrap();
        assert!(corr.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn distinct_patch_labels_give_identity() {
        let mut labels = vec![0u16; 16];
        for i in 0..4usize {
            for j in 0..4usize {
                labels[i * 4 + j] = ((i / 2) * 2 + j / 2) as u16;
            }
        }
        let mask = LabelMask::new(4, 4, labels).unwrap();
        let corr = patch_correlation(&mask, 2).unwrap();
        for m in 0..4 {
            for n in 0..4 {
                let want = if m == n { 1.0 } else { 0.0 };
                assert_eq!(corr.at(m, n), want);
            }
        }
    }

    #[test]
    fn fast_path_matches_pair_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = (0..64).map(|_| rng.gen_range(0..3u16)).collect();
        let mask = LabelMask::new(8, 8, labels).unwrap();
        let fast = patch_correlation(&mask, 2).unwrap();
        let slow = patch_correlation_oracle(&mask, 2).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn symmetry_holds_with_ignored_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = (0..36)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    255
                } else {
                    rng.gen_range(0..4u16)
                }
            })
            .collect();
        let mask = LabelMask::new(6, 6, labels).unwrap();
        let corr = patch_correlation(&mask, 3).unwrap();
        for m in 0..9 {
            for n in 0..9 {
                assert_eq!(corr.at(m, n), corr.at(n, m));
            }
        }
    }

    #[test]
    fn fully_ignored_patch_reports_sentinel() {
        let mut labels = vec![0u16; 16];
        for i in 0..2usize {
            for j in 0..2usize {
                labels[i * 4 + j] = 255;
            }
        }
        let mask = LabelMask::new(4, 4, labels).unwrap();
        let corr = patch_correlation(&mask, 2).unwrap();
        assert_eq!(corr.at(0, 0), UNDEFINED);
        assert_eq!(corr.at(0, 1), UNDEFINED);
        assert_eq!(corr.at(1, 1), 1.0);
    }

    #[test]
    fn aggregate_single_mask_equals_per_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let labels = (0..64).map(|_| rng.gen_range(0..3u16)).collect();
        let mask = LabelMask::new(8, 8, labels).unwrap();
        let per = patch_correlation(&mask, 2).unwrap();
        let agg = aggregate_correlation([&mask], 2).unwrap();
        assert!(per.max_abs_diff(&agg) < 1e-15);
        let twice = aggregate_correlation([&mask, &mask], 2).unwrap();
        assert!(per.max_abs_diff(&twice) < 1e-15);
    }

    #[test]
    fn aggregate_is_pair_weighted() {
        // one mask all label 0, one mask with the first patch half-ignored;
        // the aggregate of each entry must equal sum(corr * pairs)/sum(pairs)
        let a = LabelMask::new(4, 4, vec![0; 16]).unwrap();
        let mut labels = vec![0u16; 16];
        labels[0] = 255;
        labels[1] = 255;
        labels[4] = 1;
        let b = LabelMask::new(4, 4, labels).unwrap();
        let agg = aggregate_correlation([&a, &b], 2).unwrap();
        let ca = patch_correlation(&a, 2).unwrap();
        let cb = patch_correlation(&b, 2).unwrap();
        // entry (0,1): a has 4*4 pairs, b has 2*4 pairs
        let want = (ca.at(0, 1) * 16.0 + cb.at(0, 1) * 8.0) / 24.0;
        assert!((agg.at(0, 1) - want).abs() < 1e-15);
    }

    #[test]
    fn flops_ratios_are_exactly_quadratic_in_p() {
        let base = flops_estimate(60, 60, 2048, 256, 256, 512, 1).unwrap();
        let p2 = flops_estimate(60, 60, 2048, 256, 256, 512, 2).unwrap();
        let p4 = flops_estimate(60, 60, 2048, 256, 256, 512, 4).unwrap();
        assert_eq!(base.attention_product, 4 * p2.attention_product);
        assert_eq!(base.attention_product, 16 * p4.attention_product);
        assert_eq!(base.aggregation, 4 * p2.aggregation);
        assert_eq!(base.aggregation, 16 * p4.aggregation);
        // ordering of the whole-module totals mirrors the published trend
        assert!(base.total > p2.total && p2.total > p4.total);
        assert_eq!(base.total, base.projections + base.attention_product + base.aggregation);
    }

    #[test]
    fn flops_rejects_degenerate_dims() {
        assert!(flops_estimate(0, 4, 4, 2, 2, 2, 1).is_err());
        assert!(flops_estimate(6, 6, 4, 2, 2, 2, 4).is_err());
    }

    #[test]
    fn pgm_roundtrip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let small = LabelMask::new(2, 3, vec![0, 1, 2, 3, 255, 5]).unwrap();
        let p8 = dir.path().join("a.pgm");
        write_pgm(&p8, &small).unwrap();
        assert_eq!(read_pgm(&p8).unwrap(), small);
        let wide = LabelMask::new(2, 2, vec![0, 300, 400, 500]).unwrap();
        let p16 = dir.path().join("b.pgm");
        write_pgm(&p16, &wide).unwrap();
        assert_eq!(read_pgm(&p16).unwrap(), wide);
    }

    #[test]
    fn csv_output_is_square() {
        let mask = LabelMask::new(4, 4, vec![1; 16]).unwrap();
        let corr = patch_correlation(&mask, 2).unwrap();
        let csv = corr.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().all(|l| l.split(',').count() == 4));
    }
}
