//! Named parameter tensors, uniform Xavier initialization and the
//! versioned binary weights format.
//!
//! Weights file layout, all little-endian: magic `HPDN`, u32 version,
//! u32 tensor count, then per tensor a u32 name length, the UTF-8 name,
//! a u8 dtype code (1 = f32, 2 = f64), a u8 rank, rank u64 dims and the
//! raw row-major data.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::{Dtype, Scalar};
use super::tensor::Tensor;
use super::{NetError, NetworkSpec};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"HPDN";
pub const WEIGHTS_VERSION: u32 = 1;

/// All trainable tensors of a network, keyed by name. BTreeMap keeps
/// iteration (and therefore serialization and updates) in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> ParamStore<F> {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>, NetError> {
        self.tensors.get(name).ok_or_else(|| NetError::MissingParam {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>, NetError> {
        self.tensors.get_mut(name).ok_or_else(|| NetError::MissingParam {
            name: name.to_string(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Zero store with the same names and shapes; gradient buffer.
    pub fn zeros_like(&self) -> ParamStore<F> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        ParamStore { tensors }
    }

    /// Shapes must match the spec's channel plan exactly.
    pub fn validate_against(&self, spec: &NetworkSpec) -> Result<(), NetError> {
        let plan = spec.channel_plan()?;
        let mut expected = 0usize;
        for t in &plan.tensors {
            expected += 2;
            for (suffix, shape) in [(".weight", &t.weight_shape), (".bias", &t.bias_shape)] {
                let name = format!("{}{suffix}", t.name);
                let tensor = self.get(&name)?;
                if tensor.shape() != shape.as_slice() {
                    return Err(NetError::ShapeMismatch {
                        context: name,
                        expected: shape.clone(),
                        got: tensor.shape().to_vec(),
                    });
                }
            }
        }
        if self.tensors.len() != expected {
            return Err(NetError::BadSpec(format!(
                "store has {} tensors, spec expects {expected}",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

/// Uniform Xavier bound sqrt(6 / (fan_in + fan_out)).
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Weights uniform in +-xavier_bound, biases zero; tensors are drawn in
/// plan declaration order from a single seeded stream, so a seed pins
/// every parameter.
pub fn init_xavier_uniform<F: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ParamStore<F>, NetError> {
    let plan = spec.channel_plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for t in &plan.tensors {
        let bound = xavier_bound(t.fan_in, t.fan_out);
        let n: usize = t.weight_shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        store.insert(format!("{}.weight", t.name), Tensor::new(t.weight_shape.clone(), data));
        store.insert(format!("{}.bias", t.name), Tensor::zeros(t.bias_shape.clone()));
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadReport {
    pub source_dtype: Dtype,
    /// True when the file dtype differs from the requested one; values
    /// were converted with round-to-nearest.
    pub converted: bool,
}

pub fn save_params<F: Scalar>(store: &ParamStore<F>, path: &Path) -> Result<(), NetError> {
    let fmt_err = |message: String| NetError::WeightsFormat {
        path: path.display().to_string(),
        message,
    };
    let file = std::fs::File::create(path).map_err(|e| fmt_err(e.to_string()))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<(), NetError> {
        w.write_all(bytes).map_err(|e| fmt_err(e.to_string()))
    };
    write(WEIGHTS_MAGIC)?;
    write(&WEIGHTS_VERSION.to_le_bytes())?;
    write(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        write(&(name.len() as u32).to_le_bytes())?;
        write(name.as_bytes())?;
        write(&[F::DTYPE.code(), tensor.shape().len() as u8])?;
        for &dim in tensor.shape() {
            write(&(dim as u64).to_le_bytes())?;
        }
        match F::DTYPE {
            Dtype::F32 => {
                for &v in tensor.data() {
                    write(&(v.to_f64() as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in tensor.data() {
                    write(&v.to_f64().to_le_bytes())?;
                }
            }
        }
    }
    w.flush().map_err(|e| fmt_err(e.to_string()))
}

pub fn load_params<F: Scalar>(path: &Path) -> Result<(ParamStore<F>, LoadReport), NetError> {
    let fmt_err = |message: String| NetError::WeightsFormat {
        path: path.display().to_string(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| fmt_err(e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut read_exact = |buf: &mut [u8]| -> Result<(), NetError> {
        r.read_exact(buf)
            .map_err(|e| fmt_err(format!("truncated or unreadable: {e}")))
    };
    let mut magic = [0u8; 4];
    read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(fmt_err(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != WEIGHTS_VERSION {
        return Err(fmt_err(format!(
            "unsupported version {version}, expected {WEIGHTS_VERSION}"
        )));
    }
    read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf);
    let mut store = ParamStore::new();
    let mut source_dtype = F::DTYPE;
    for _ in 0..count {
        read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        if name_len > 4096 {
            return Err(fmt_err(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf).map_err(|_| fmt_err("name not UTF-8".into()))?;
        let mut two = [0u8; 2];
        read_exact(&mut two)?;
        let dtype = Dtype::from_code(two[0]).ok_or_else(|| fmt_err(format!("bad dtype code {}", two[0])))?;
        source_dtype = dtype;
        let rank = two[1] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank {
            read_exact(&mut u64buf)?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        match dtype {
            Dtype::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    read_exact(&mut buf)?;
                    data.push(F::from_f64(f32::from_le_bytes(buf) as f64));
                }
            }
            Dtype::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    read_exact(&mut buf)?;
                    data.push(F::from_f64(f64::from_le_bytes(buf)));
                }
            }
        }
        store.insert(name, Tensor::new(dims, data));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| fmt_err(e.to_string()))? != 0 {
        return Err(fmt_err("trailing bytes after last tensor".into()));
    }
    let report = LoadReport {
        source_dtype,
        converted: source_dtype != F::DTYPE,
    };
    Ok((store, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn xavier_bounds_match_fan_arithmetic() {
        // Dense layer fan 4 -> 2: bound sqrt(6/6) = 1.
        assert!((xavier_bound(4, 2) - 1.0).abs() < 1e-12);
        // Conv 3x3, 2 in, 4 out: fans 18 and 36, bound sqrt(6/54).
        let b = xavier_bound(18, 36);
        assert!((b - (6.0f64 / 54.0).sqrt()).abs() < 1e-12);
        assert!((b - 0.3333).abs() < 1e-4);
    }

    #[test]
    fn init_respects_bounds_and_zero_biases() {
        let spec = NetworkSpec::toy(2, vec![1], 4);
        let store = init_xavier_uniform::<f64>(&spec, 7).unwrap();
        store.validate_against(&spec).unwrap();
        let plan = spec.channel_plan().unwrap();
        for t in &plan.tensors {
            let bound = xavier_bound(t.fan_in, t.fan_out);
            let weight = store.get(&format!("{}.weight", t.name)).unwrap();
            assert!(weight.data().iter().all(|v| v.abs() <= bound));
            let bias = store.get(&format!("{}.bias", t.name)).unwrap();
            assert!(bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = NetworkSpec::toy(2, vec![1], 4);
        let a = init_xavier_uniform::<f32>(&spec, 11).unwrap();
        let b = init_xavier_uniform::<f32>(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = init_xavier_uniform::<f32>(&spec, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_sample_mean_near_zero() {
        // Empirical mean of ~1e5 uniform draws stays within 3 sigma of 0.
        let spec = NetworkSpec::toy(12, vec![6, 6], 48);
        let store = init_xavier_uniform::<f64>(&spec, 3).unwrap();
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut max_bound: f64 = 0.0;
        let plan = spec.channel_plan().unwrap();
        for t in &plan.tensors {
            let weight = store.get(&format!("{}.weight", t.name)).unwrap();
            sum += weight.data().iter().sum::<f64>();
            count += weight.numel();
            max_bound = max_bound.max(xavier_bound(t.fan_in, t.fan_out));
        }
        assert!(count > 50_000, "want a large sample, got {count}");
        let mean = sum / count as f64;
        // Uniform on [-b, b] has sd b/sqrt(3); the mean estimator has
        // sd b/sqrt(3 n). Use the largest bound as a loose envelope.
        let three_sigma = 3.0 * max_bound / (3.0 * count as f64).sqrt();
        assert!(mean.abs() < three_sigma, "mean {mean} vs 3sigma {three_sigma}");
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let spec = NetworkSpec::toy(2, vec![2], 4);
        let store = init_xavier_uniform::<f64>(&spec, 99).unwrap();
        let path = dir.path().join("w.hpdn");
        save_params(&store, &path).unwrap();
        let (back, report) = load_params::<f64>(&path).unwrap();
        assert_eq!(store, back);
        assert_eq!(report.source_dtype, Dtype::F64);
        assert!(!report.converted);
    }

    #[test]
    fn f32_roundtrip_and_cross_dtype_conversion() {
        let dir = TempDir::new().unwrap();
        let spec = NetworkSpec::toy(2, vec![1], 4);
        let store = init_xavier_uniform::<f32>(&spec, 5).unwrap();
        let path = dir.path().join("w.hpdn");
        save_params(&store, &path).unwrap();
        let (same, report) = load_params::<f32>(&path).unwrap();
        assert_eq!(store, same);
        assert!(!report.converted);
        // Loading f32 weights into an f64 run is flagged and value-exact.
        let (widened, report) = load_params::<f64>(&path).unwrap();
        assert!(report.converted);
        assert_eq!(report.source_dtype, Dtype::F32);
        for (name, tensor) in store.iter() {
            let wide = widened.get(name).unwrap();
            for (&a, &b) in tensor.data().iter().zip(wide.data()) {
                assert_eq!(a as f64, b);
            }
        }
        // Loading f64 into f32 converts with rounding.
        let store64 = init_xavier_uniform::<f64>(&spec, 5).unwrap();
        let path64 = dir.path().join("w64.hpdn");
        save_params(&store64, &path64).unwrap();
        let (narrowed, report) = load_params::<f32>(&path64).unwrap();
        assert!(report.converted);
        for (name, tensor) in store64.iter() {
            let narrow = narrowed.get(name).unwrap();
            for (&a, &b) in tensor.data().iter().zip(narrow.data()) {
                assert_eq!(a as f32, b);
            }
        }
    }

    #[test]
    fn truncated_file_is_clean_error() {
        let dir = TempDir::new().unwrap();
        let spec = NetworkSpec::toy(2, vec![1], 4);
        let store = init_xavier_uniform::<f32>(&spec, 5).unwrap();
        let path = dir.path().join("w.hpdn");
        save_params(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.hpdn");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_params::<f32>(&cut),
            Err(NetError::WeightsFormat { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("junk.hpdn");
        std::fs::write(&path, b"JUNKxxxxxxxx").unwrap();
        assert!(load_params::<f32>(&path).is_err());
        let mut bytes = Vec::new();
        bytes.extend_from_slice(WEIGHTS_MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_params::<f32>(&path),
            Err(NetError::WeightsFormat { .. })
        ));
    }

    #[test]
    fn shape_validation_catches_drift() {
        let spec = NetworkSpec::toy(2, vec![1], 4);
        let mut store = init_xavier_uniform::<f32>(&spec, 5).unwrap();
        let good_shape = store.get("fc.weight").unwrap().shape().to_vec();
        store.insert("fc.weight", Tensor::zeros(vec![good_shape[0] + 2, good_shape[1]]));
        assert!(matches!(
            store.validate_against(&spec),
            Err(NetError::ShapeMismatch { .. })
        ));
    }
}
