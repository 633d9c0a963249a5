//! The sparse triple-product tensor `C_ijk = integral y_i y_j y_k` and its
//! disk cache.
//!
//! Entries are computed once by product Gauss-Legendre x uniform-phi
//! quadrature (exact for the polynomial integrands involved), stored for
//! unique sorted triples `i <= j <= k`, and compiled into a per-output
//! contraction plan for fast products.

use super::ShError;
use crate::math::gauss_legendre;
use nalgebra::Vector3;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

const CACHE_MAGIC: &[u8; 4] = b"SHC1";
const DROP_BELOW: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TensorEntry {
    pub i: u32,
    pub j: u32,
    pub k: u32,
    pub value: f64,
}

/// Pair contraction used by [`super::sh_product`]:
/// `out[i] += c * (a[j] b[k] + a[k] b[j])` (single term when `j == k`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct PlanEntry {
    pub j: u32,
    pub k: u32,
    pub c: f64,
}

pub struct TripleProductTensor {
    pub band_count: usize,
    /// Unique entries with `i <= j <= k`, lexicographically sorted.
    pub entries: Vec<TensorEntry>,
    /// Per-output-index contraction plan (unordered pairs `j <= k`).
    pub(crate) plan: Vec<Vec<PlanEntry>>,
}

impl TripleProductTensor {
    /// Symmetric lookup; zero for dropped / rule-violating triples.
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        let mut t = [i as u32, j as u32, k as u32];
        t.sort_unstable();
        match self
            .entries
            .binary_search_by(|e| (e.i, e.j, e.k).cmp(&(t[0], t[1], t[2])))
        {
            Ok(pos) => self.entries[pos].value,
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    fn build(band_count: usize) -> Self {
        let n2 = band_count * band_count;
        // GL in cos(theta) x uniform in phi. The phi rule with M points is
        // exact for circular harmonics up to order M-1; products reach
        // 3(band_count-1).
        let nt = 2 * band_count;
        let m_phi = 4 * band_count;
        let (nodes, weights) = gauss_legendre(nt);
        let mut basis_at = Vec::with_capacity(nt * m_phi);
        let mut point_w = Vec::with_capacity(nt * m_phi);
        let mut buf = vec![0.0; n2];
        for (t, wt) in nodes.iter().zip(&weights) {
            let st = (1.0 - t * t).max(0.0).sqrt();
            for p in 0..m_phi {
                let phi = 2.0 * std::f64::consts::PI * p as f64 / m_phi as f64;
                let dir = Vector3::new(st * phi.cos(), st * phi.sin(), *t);
                super::basis::eval_basis(dir, band_count, &mut buf);
                basis_at.push(buf.clone());
                point_w.push(wt * 2.0 * std::f64::consts::PI / m_phi as f64);
            }
        }

        let mut entries = Vec::new();
        for i in 0..n2 {
            for j in i..n2 {
                for k in j..n2 {
                    let mut acc = 0.0;
                    for (ys, w) in basis_at.iter().zip(&point_w) {
                        acc += w * ys[i] * ys[j] * ys[k];
                    }
                    if acc.abs() >= DROP_BELOW {
                        entries.push(TensorEntry {
                            i: i as u32,
                            j: j as u32,
                            k: k as u32,
                            value: acc,
                        });
                    }
                }
            }
        }
        Self::from_entries(band_count, entries)
    }

    fn from_entries(band_count: usize, entries: Vec<TensorEntry>) -> Self {
        let n2 = band_count * band_count;
        // Expand symmetric storage into the per-i plan over unordered (j,k)
        // pairs: iterate all j <= k per output and look the value up.
        let by_key: HashMap<(u32, u32, u32), f64> = entries
            .iter()
            .map(|e| ((e.i, e.j, e.k), e.value))
            .collect();
        let lookup = |a: usize, b: usize, c: usize| -> f64 {
            let mut t = [a as u32, b as u32, c as u32];
            t.sort_unstable();
            by_key.get(&(t[0], t[1], t[2])).copied().unwrap_or(0.0)
        };
        let mut plan = vec![Vec::new(); n2];
        for i in 0..n2 {
            for j in 0..n2 {
                for k in j..n2 {
                    let c = lookup(i, j, k);
                    if c != 0.0 {
                        plan[i].push(PlanEntry {
                            j: j as u32,
                            k: k as u32,
                            c,
                        });
                    }
                }
            }
        }
        TripleProductTensor {
            band_count,
            entries,
            plan,
        }
    }

    fn cache_path(band_count: usize) -> PathBuf {
        let dir = std::env::var_os("SHSEED_CACHE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("shseed-cache"));
        dir.join(format!("sh_triple_n{band_count}.bin"))
    }

    fn write_cache(&self, path: &PathBuf) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(CACHE_MAGIC)?;
            f.write_all(&(self.band_count as u32).to_le_bytes())?;
            f.write_all(&(self.entries.len() as u64).to_le_bytes())?;
            for e in &self.entries {
                f.write_all(&e.i.to_le_bytes())?;
                f.write_all(&e.j.to_le_bytes())?;
                f.write_all(&e.k.to_le_bytes())?;
                f.write_all(&e.value.to_le_bytes())?;
            }
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn read_cache(path: &PathBuf, band_count: usize) -> std::io::Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, "bad tensor cache");
        if &magic != CACHE_MAGIC {
            return Err(bad());
        }
        let mut b4 = [0u8; 4];
        f.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) as usize != band_count {
            return Err(bad());
        }
        let mut b8 = [0u8; 8];
        f.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let n2 = (band_count * band_count) as u32;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            f.read_exact(&mut b4)?;
            let i = u32::from_le_bytes(b4);
            f.read_exact(&mut b4)?;
            let j = u32::from_le_bytes(b4);
            f.read_exact(&mut b4)?;
            let k = u32::from_le_bytes(b4);
            f.read_exact(&mut b8)?;
            let value = f64::from_le_bytes(b8);
            if !(i <= j && j <= k && k < n2) || !value.is_finite() {
                return Err(bad());
            }
            entries.push(TensorEntry { i, j, k, value });
        }
        Ok(Self::from_entries(band_count, entries))
    }
}

/// Returns the shared tensor for `band_count`, building (and caching to
/// disk) on first use.
pub fn triple_product_tensor(band_count: usize) -> Result<Arc<TripleProductTensor>, ShError> {
    if band_count == 0 || band_count > super::MAX_BANDS {
        return Err(ShError::BandRange(band_count));
    }
    static REGISTRY: OnceLock<Mutex<HashMap<usize, Arc<TripleProductTensor>>>> = OnceLock::new();
    let registry = REGISTRY.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = registry.lock().unwrap();
    if let Some(t) = map.get(&band_count) {
        return Ok(t.clone());
    }
    let path = TripleProductTensor::cache_path(band_count);
    let tensor = match TripleProductTensor::read_cache(&path, band_count) {
        Ok(t) => t,
        Err(_) => {
            let t = TripleProductTensor::build(band_count);
            // Best effort: the tensor stays usable if the cache dir is not
            // writable.
            let _ = t.write_cache(&path);
            t
        }
    };
    let arc = Arc::new(tensor);
    map.insert(band_count, arc.clone());
    Ok(arc)
}

#[cfg(test)]
mod tests {
    use super::super::Y00;
    use super::*;

    #[test]
    fn c000_is_y00() {
        let t = triple_product_tensor(4).unwrap();
        approx::assert_relative_eq!(t.get(0, 0, 0), Y00, epsilon = 1e-12);
    }

    #[test]
    fn odd_parity_triples_vanish() {
        let t = triple_product_tensor(4).unwrap();
        for (i, j, k) in [(0usize, 0, 2), (0, 3, 6), (1, 4, 4)] {
            // band indices l = floor(sqrt(idx))
            let l = |x: usize| (x as f64).sqrt().floor() as usize;
            assert_eq!((l(i) + l(j) + l(k)) % 2, 1);
            assert!(t.get(i, j, k).abs() < 1e-10);
        }
    }

    #[test]
    fn lookup_is_symmetric() {
        let t = triple_product_tensor(4).unwrap();
        for ijk in [(2usize, 5, 9), (0, 6, 6), (1, 3, 8), (4, 4, 4)] {
            let (i, j, k) = ijk;
            let v = t.get(i, j, k);
            assert_eq!(v, t.get(k, j, i));
            assert_eq!(v, t.get(j, i, k));
            assert_eq!(v, t.get(k, i, j));
        }
    }

    #[test]
    fn cache_roundtrip() {
        let t = TripleProductTensor::build(3);
        let dir = std::env::temp_dir().join("shseed-test-cache");
        let path = dir.join("sh_triple_n3.bin");
        let _ = std::fs::remove_file(&path);
        std::fs::create_dir_all(&dir).unwrap();
        t.write_cache(&path).unwrap();
        let back = TripleProductTensor::read_cache(&path, 3).unwrap();
        assert_eq!(t.entries.len(), back.entries.len());
        for (a, b) in t.entries.iter().zip(&back.entries) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn selection_rules_hold() {
        let t = triple_product_tensor(4).unwrap();
        let band = |x: u32| (x as f64).sqrt().floor() as i64;
        for e in &t.entries {
            let (li, lj, lk) = (band(e.i), band(e.j), band(e.k));
            assert_eq!((li + lj + lk) % 2, 0, "parity violated at {:?}", e);
            assert!(
                (lj - lk).abs() <= li && li <= lj + lk,
                "triangle rule violated at {:?}",
                e
            );
        }
    }
}
