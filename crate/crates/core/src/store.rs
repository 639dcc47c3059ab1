//! MCINRM1 model files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "MCINRM1"                              7 bytes
//! version                                u32
//! fingerprint   N, T, M                  u32 x 3
//!               M x name                 u32 length + UTF-8
//!               bounds hash              u64
//! normalizer    x, y, z, t               (f64 min, f64 max) x 4
//!               M x value range          (f64 min, f64 max)
//! network       width                    u32
//!               frequencies              u32
//!               raw input included       u8
//!               gfe blocks, lfe blocks   u32 x 2
//!               omega of first layer     f64
//!               head mode                u8 (0 branched, 1 shared)
//! partition     max split depth          u32
//!               K                        u32
//!               per tree, pre-order:     u8 has-children, f32 x 3 centroid
//! leaves        count                    u32
//!               per terminal leaf, pre-order:
//!                 root, node             u32 x 2
//!                 point count            u64
//!                 per-variable MSE       f64 x M
//!                 aggregate MSE          f64
//!                 parameter count        u32
//!                 parameters             f32 x count, network tensor order
//! CRC-32 of every preceding byte         u32
//! ```
//!
//! Weights are stored raw; compressing the file further is out of scope.

use std::path::Path;

use crate::clustering::{ClusterNode, ClusterPartition, ClusterStats, LeafId, MAX_SPLIT_DEPTH_LIMIT};
use crate::codec::{ByteReader, ByteWriter};
use crate::data::{raw_size_bytes, AffineMap, Dataset, Fingerprint, Normalizer};
use crate::error::{Error, Result};
use crate::model::{HeadMode, NetworkConfig, NetworkParams, PositionalEncodingConfig};
use crate::numeric::ParamSet;

pub const MODEL_MAGIC: &[u8; 7] = b"MCINRM1";
pub const FORMAT_VERSION: u32 = 1;

/// Trained network and residual summary of one terminal leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafModel {
    pub leaf_id: LeafId,
    pub params: NetworkParams<f32>,
    pub stats: ClusterStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedModel {
    pub version: u32,
    pub fingerprint: Fingerprint,
    pub normalizer: Normalizer,
    pub network: NetworkConfig,
    pub partition: ClusterPartition,
    /// Terminal leaves in partition pre-order.
    pub leaves: Vec<LeafModel>,
}

impl EncodedModel {
    /// Checks that there is exactly one network per terminal leaf, in
    /// pre-order, each shaped like `network`.
    pub fn new(
        version: u32,
        fingerprint: Fingerprint,
        normalizer: Normalizer,
        network: NetworkConfig,
        partition: ClusterPartition,
        leaves: Vec<LeafModel>,
    ) -> Result<Self> {
        let model = Self {
            version,
            fingerprint,
            normalizer,
            network,
            partition,
            leaves,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::format("model", detail));
        if self.version != FORMAT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        self.network.validate()?;
        let m = self.fingerprint.variable_count as usize;
        if self.network.num_variables != m || self.normalizer.values.len() != m {
            return bad(format!(
                "variable count disagrees: fingerprint {m}, network {}, normalizer {}",
                self.network.num_variables,
                self.normalizer.values.len()
            ));
        }
        let expected = self.partition.leaves();
        let actual: Vec<LeafId> = self.leaves.iter().map(|l| l.leaf_id).collect();
        if expected != actual {
            return bad(format!(
                "leaf networks {:?} do not match partition leaves {:?}",
                actual.iter().map(ToString::to_string).collect::<Vec<_>>(),
                expected.iter().map(ToString::to_string).collect::<Vec<_>>()
            ));
        }
        for leaf in &self.leaves {
            if leaf.params.config != self.network {
                return bad(format!("leaf {} has a different network shape", leaf.leaf_id));
            }
            if leaf.stats.per_variable_mse.len() != m {
                return bad(format!("leaf {} stats cover the wrong number of variables", leaf.leaf_id));
            }
        }
        Ok(())
    }

    pub fn leaf(&self, id: LeafId) -> Option<&LeafModel> {
        self.leaves.iter().find(|l| l.leaf_id == id)
    }

    pub fn total_params(&self) -> usize {
        self.leaves.len() * self.network.param_count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u32(self.version);

        let fp = &self.fingerprint;
        w.u32(fp.point_count);
        w.u32(fp.timestep_count);
        w.u32(fp.variable_count);
        for name in &fp.variable_names {
            w.string(name);
        }
        w.u64(fp.bounds_hash);

        let norm = &self.normalizer;
        for map in norm.coords.iter().chain([&norm.time]).chain(&norm.values) {
            w.f64(map.min);
            w.f64(map.max);
        }

        let net = &self.network;
        w.u32(net.width as u32);
        w.u32(net.pe.num_frequencies as u32);
        w.u8(net.pe.include_raw_input as u8);
        w.u32(net.gfe_blocks as u32);
        w.u32(net.lfe_blocks as u32);
        w.f64(net.omega_first);
        w.u8(match net.head_mode {
            HeadMode::Branched => 0,
            HeadMode::Shared => 1,
        });

        w.u32(self.partition.max_split_depth as u32);
        w.u32(self.partition.roots.len() as u32);
        for root in &self.partition.roots {
            write_tree(&mut w, root);
        }

        w.u32(self.leaves.len() as u32);
        for leaf in &self.leaves {
            w.u32(leaf.leaf_id.root);
            w.u32(leaf.leaf_id.node);
            w.u64(leaf.stats.point_count);
            for &v in &leaf.stats.per_variable_mse {
                w.f64(v);
            }
            w.f64(leaf.stats.aggregate_mse);
            w.u32(leaf.params.param_count() as u32);
            for t in leaf.params.tensors() {
                w.f32s(t);
            }
        }

        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MODEL_MAGIC.len() + 4 {
            return Err(Error::Truncated {
                what: "model file",
                offset: 0,
                needed: MODEL_MAGIC.len() + 4 - bytes.len(),
            });
        }
        if &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
            return Err(Error::format("model file", "bad magic; not an MCINRM1 model"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = ByteReader::new(body, "model file");
        r.take(MODEL_MAGIC.len())?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("model file", format!("unsupported version {version}")));
        }

        let point_count = r.u32()?;
        let timestep_count = r.u32()?;
        let variable_count = r.u32()?;
        let m = variable_count as usize;
        if m == 0 || m > r.remaining() {
            return Err(Error::format("model file", format!("implausible variable count {m}")));
        }
        let variable_names = (0..m).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let bounds_hash = r.u64()?;
        let fingerprint = Fingerprint {
            point_count,
            timestep_count,
            variable_count,
            variable_names,
            bounds_hash,
        };

        let mut read_map = || -> Result<AffineMap> { Ok(AffineMap::new(r.f64()?, r.f64()?)) };
        let coords = [read_map()?, read_map()?, read_map()?];
        let time = read_map()?;
        let values = (0..m).map(|_| read_map()).collect::<Result<Vec<_>>>()?;
        let normalizer = Normalizer { coords, time, values };

        let width = r.u32()? as usize;
        let num_frequencies = r.u32()? as usize;
        let include_raw_input = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::format("model file", format!("bad raw-input flag {v}"))),
        };
        let gfe_blocks = r.u32()? as usize;
        let lfe_blocks = r.u32()? as usize;
        let omega_first = r.f64()?;
        let head_mode = match r.u8()? {
            0 => HeadMode::Branched,
            1 => HeadMode::Shared,
            v => return Err(Error::format("model file", format!("bad head mode {v}"))),
        };
        let network = NetworkConfig {
            width,
            num_variables: m,
            pe: PositionalEncodingConfig {
                num_frequencies,
                include_raw_input,
                ..PositionalEncodingConfig::default()
            },
            gfe_blocks,
            lfe_blocks,
            omega_first,
            head_mode,
        };
        network.validate()?;

        let max_split_depth = r.u32()? as usize;
        if max_split_depth > MAX_SPLIT_DEPTH_LIMIT {
            return Err(Error::format("model file", format!("split depth {max_split_depth} too large")));
        }
        let k = r.u32()? as usize;
        if k == 0 || k > r.remaining() {
            return Err(Error::format("model file", format!("implausible cluster count {k}")));
        }
        let roots = (0..k)
            .map(|_| read_tree(&mut r, 0, max_split_depth))
            .collect::<Result<Vec<_>>>()?;
        let partition = ClusterPartition { roots, max_split_depth };

        let expected_params = network.param_count();
        let leaf_count = r.u32()? as usize;
        if leaf_count > r.remaining() {
            return Err(Error::format("model file", format!("implausible leaf count {leaf_count}")));
        }
        let mut leaves = Vec::with_capacity(leaf_count);
        for _ in 0..leaf_count {
            let leaf_id = LeafId {
                root: r.u32()?,
                node: r.u32()?,
            };
            let point_count = r.u64()?;
            let per_variable_mse = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let aggregate_mse = r.f64()?;
            let count = r.u32()? as usize;
            if count != expected_params {
                return Err(Error::format(
                    "model file",
                    format!("leaf {leaf_id} stores {count} parameters, network needs {expected_params}"),
                ));
            }
            let flat = r.f32s(count)?;
            let mut params = NetworkParams::zeros(&network);
            params.load_flat(&flat)?;
            leaves.push(LeafModel {
                leaf_id,
                params,
                stats: ClusterStats {
                    leaf_id,
                    point_count,
                    per_variable_mse,
                    aggregate_mse,
                },
            });
        }
        if r.remaining() != 0 {
            return Err(Error::format("model file", format!("{} unexpected bytes before checksum", r.remaining())));
        }
        Self::new(version, fingerprint, normalizer, network, partition, leaves)
    }

    /// Writes the model and returns the file size in bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a dataset whose fingerprint differs from the training data's.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let fp = dataset.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                model: self.fingerprint.to_string(),
                dataset: fp.to_string(),
            });
        }
        Ok(())
    }
}

fn write_tree(w: &mut ByteWriter, node: &ClusterNode) {
    w.u8(node.children.is_some() as u8);
    w.f32s(&node.centroid);
    if let Some(children) = &node.children {
        write_tree(w, &children[0]);
        write_tree(w, &children[1]);
    }
}

fn read_tree(r: &mut ByteReader<'_>, depth: usize, max_depth: usize) -> Result<ClusterNode> {
    let split = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::format("model file", format!("bad tree flag {v}"))),
    };
    let c = [r.f32()?, r.f32()?, r.f32()?];
    if split && depth >= max_depth {
        return Err(Error::format("model file", "split tree deeper than its depth cap"));
    }
    let children = if split {
        Some(Box::new([
            read_tree(r, depth + 1, max_depth)?,
            read_tree(r, depth + 1, max_depth)?,
        ]))
    } else {
        None
    };
    Ok(ClusterNode { centroid: c, children })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionReport {
    pub raw_bytes: u64,
    pub model_bytes: u64,
    pub ratio: f64,
}

impl std::fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ({} raw bytes / {} model bytes)", self.ratio, self.raw_bytes, self.model_bytes)
    }
}

pub fn compression_ratio_from_sizes(raw_bytes: u64, model_bytes: u64) -> CompressionReport {
    let ratio = raw_bytes as f64 / model_bytes as f64;
    if ratio < 1.0 {
        log::warn!("model file ({model_bytes} bytes) is larger than the raw data ({raw_bytes} bytes)");
    }
    CompressionReport {
        raw_bytes,
        model_bytes,
        ratio,
    }
}

/// Raw value bytes of `dataset` over the size of the model file on disk.
pub fn compression_ratio(dataset: &Dataset, model_path: impl AsRef<Path>) -> Result<CompressionReport> {
    let path = model_path.as_ref();
    let size = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    Ok(compression_ratio_from_sizes(raw_size_bytes(dataset), size))
}
