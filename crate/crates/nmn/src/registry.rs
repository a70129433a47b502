//! Parameter layers and the sharing table that maps module kinds onto them.
//!
//! Modules do not own weights. Each module kind binds a small set of roles
//! (textual projection, visual projection, a second visual projection for
//! the right-hand dependency, an attention gate, and an output head) to
//! layers in a single registry, and several kinds bind the same layer for
//! the same role. Sharing choices worth calling out:
//!
//! * `same` and `different` bind identical layers in every role, and so do
//!   `same_all`/`different_all`: the *different* modules are computed as
//!   one minus their counterpart.
//! * `relate_sub`/`relate_obj` share textual, visual and gate layers but
//!   keep separate output heads, which is what distinguishes the relation
//!   direction.
//! * `select` and the filters share one visual projection; the filters and
//!   `verify_attr` share the attribute textual projection.
//! * Modules that project both of their attention dependencies bind a
//!   `VisualSecond` role. For symmetric modules (`same`, `different`,
//!   `common`) it is the same layer as `Visual`, so swapping the inputs
//!   provably cannot change the output. Directional modules
//!   (`verify_rel_*`, `choose_rel`, `compare`) bind a distinct second
//!   layer, otherwise they could never tell subject from object.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::ModuleKind;
use crate::tape::{GradStore, ParamAccess, ParamId};
use crate::tensor::{Matrix, Vector};

/// Model dimensions shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Feature dimension of word embeddings and object features.
    pub d: usize,
    /// Number of objects per scene (attention vectors have length k).
    pub k: usize,
    /// Size of the answer vocabulary.
    pub answers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerRole {
    Textual,
    Visual,
    VisualSecond,
    Gate,
    Output,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("dimensions must be positive, got d={d} k={k} answers={answers}")]
    BadDims { d: usize, k: usize, answers: usize },
    #[error("module `{kind}` has no `{role:?}` layer")]
    MissingRole { kind: ModuleKind, role: LayerRole },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint layer mismatch: expected `{expected}`, found `{found}`")]
    MismatchedLayer { expected: String, found: String },
    #[error("layer `{name}` has shape {rows}x{cols}, expected {want_rows}x{want_cols}")]
    BadShape {
        name: String,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// One affine layer: y = W x + b.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weight: Matrix,
    pub bias: Vector,
}

/// Input / output widths of a layer as functions of [`Dims`].
#[derive(Clone, Copy)]
enum Width {
    D,
    K,
    KPlus3,
    One,
    Answers,
}

impl Width {
    fn resolve(self, dims: Dims) -> usize {
        match self {
            Width::D => dims.d,
            Width::K => dims.k,
            Width::KPlus3 => dims.k + 3,
            Width::One => 1,
            Width::Answers => dims.answers,
        }
    }
}

struct LayerSpec {
    name: &'static str,
    role: LayerRole,
    members: &'static [ModuleKind],
    input: Width,
    output: Width,
}

/// Extra (kind, role) bindings that alias an already-listed layer, used by
/// symmetric two-dependency modules whose second projection is the first.
struct AliasSpec {
    kind: ModuleKind,
    role: LayerRole,
    target: &'static str,
}

use LayerRole::{Gate, Output, Textual, Visual, VisualSecond};
use ModuleKind::*;

fn layer_specs() -> Vec<LayerSpec> {
    use Width::{Answers, KPlus3, D, K, One};
    let spec = |name, role, members, input, output| LayerSpec {
        name,
        role,
        members,
        input,
        output,
    };
    vec![
        // Textual projections.
        spec("txt.select", Textual, &[Select][..], D, D),
        spec("txt.attr", Textual, &[FilterAttr, FilterNot, VerifyAttr][..], D, D),
        spec("txt.pos", Textual, &[FilterPos, VerifyPos, ChoosePos][..], D, D),
        spec(
            "txt.relation",
            Textual,
            &[RelateSub, RelateObj, VerifyRelSub, VerifyRelObj, ChooseRel][..],
            D,
            D,
        ),
        spec(
            "txt.category",
            Textual,
            &[RelateAttr, Same, SameAll, Different, DifferentAll][..],
            D,
            D,
        ),
        spec("txt.choose_name", Textual, &[ChooseName][..], D, D),
        spec("txt.choose_attr", Textual, &[ChooseAttr][..], D, D),
        spec("txt.compare", Textual, &[Compare][..], D, D),
        // Visual projections (first dependency where two exist).
        spec(
            "vis.detect",
            Visual,
            &[Select, FilterAttr, FilterNot, FilterPos][..],
            D,
            D,
        ),
        spec("vis.relate", Visual, &[RelateSub, RelateObj, RelateAttr][..], D, D),
        spec(
            "vis.pair",
            Visual,
            &[Same, SameAll, Different, DifferentAll][..],
            D,
            D,
        ),
        spec("vis.verify_rel", Visual, &[VerifyRelSub, VerifyRelObj][..], D, D),
        spec("vis.verify", Visual, &[VerifyAttr, VerifyPos][..], D, D),
        spec(
            "vis.choose",
            Visual,
            &[ChooseName, ChooseAttr, ChoosePos, ChooseRel, Compare, Common][..],
            D,
            D,
        ),
        spec("vis.query", Visual, &[QueryName, QueryAttr, QueryPos][..], D, D),
        // Second visual projections for directional two-dependency modules.
        spec(
            "vis.verify_rel.second",
            VisualSecond,
            &[VerifyRelSub, VerifyRelObj][..],
            D,
            D,
        ),
        spec("vis.choose.second", VisualSecond, &[ChooseRel, Compare][..], D, D),
        // Attention gates of the relate family.
        spec("gate.relate", Gate, &[RelateSub, RelateObj][..], K, K),
        spec("gate.relate_attr", Gate, &[RelateAttr][..], K, K),
        // Output heads.
        spec("out.select", Output, &[Select][..], K, K),
        spec("out.filter_attr", Output, &[FilterAttr][..], K, K),
        spec("out.filter_not", Output, &[FilterNot][..], K, K),
        spec("out.filter_pos", Output, &[FilterPos][..], K, K),
        spec("out.relate_sub", Output, &[RelateSub][..], D, K),
        spec("out.relate_obj", Output, &[RelateObj][..], D, K),
        spec("out.relate_attr", Output, &[RelateAttr][..], D, K),
        spec("out.same", Output, &[Same, Different][..], D, One),
        spec("out.same_all", Output, &[SameAll, DifferentAll][..], D, One),
        spec("out.exist", Output, &[Exist][..], KPlus3, One),
        spec("out.verify_rel_sub", Output, &[VerifyRelSub][..], D, One),
        spec("out.verify_rel_obj", Output, &[VerifyRelObj][..], D, One),
        spec("out.verify_attr", Output, &[VerifyAttr][..], D, One),
        spec("out.verify_pos", Output, &[VerifyPos][..], D, One),
        spec("out.choose_name", Output, &[ChooseName][..], D, Answers),
        spec("out.choose_attr", Output, &[ChooseAttr][..], D, Answers),
        spec("out.choose_pos", Output, &[ChoosePos][..], D, Answers),
        spec("out.choose_rel", Output, &[ChooseRel][..], D, Answers),
        spec("out.compare", Output, &[Compare][..], D, Answers),
        spec("out.common", Output, &[Common][..], D, Answers),
        spec("out.query_name", Output, &[QueryName][..], D, Answers),
        spec("out.query_attr", Output, &[QueryAttr][..], D, Answers),
        spec("out.query_pos", Output, &[QueryPos][..], D, Answers),
    ]
}

fn alias_specs() -> Vec<AliasSpec> {
    vec![
        AliasSpec {
            kind: Same,
            role: VisualSecond,
            target: "vis.pair",
        },
        AliasSpec {
            kind: Different,
            role: VisualSecond,
            target: "vis.pair",
        },
        AliasSpec {
            kind: Common,
            role: VisualSecond,
            target: "vis.choose",
        },
    ]
}

const MAGIC: &[u8; 8] = b"NMNCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ParameterRegistry {
    dims: Dims,
    seed: u64,
    layers: Vec<Layer>,
    bindings: BTreeMap<(ModuleKind, LayerRole), usize>,
}

impl ParameterRegistry {
    /// Builds all layers with Kaiming-uniform weights (U(-l, l) with
    /// l = sqrt(6 / fan_in)) and zero biases. Each layer draws from its own
    /// stream seeded by (seed, layer name), so adding a layer does not
    /// reshuffle the others.
    pub fn init(seed: u64, dims: Dims) -> Result<Self, RegistryError> {
        if dims.d == 0 || dims.k == 0 || dims.answers == 0 {
            return Err(RegistryError::BadDims {
                d: dims.d,
                k: dims.k,
                answers: dims.answers,
            });
        }
        let mut layers = Vec::new();
        let mut bindings = BTreeMap::new();
        let mut by_name: BTreeMap<&'static str, usize> = BTreeMap::new();
        for spec in layer_specs() {
            let fan_in = spec.input.resolve(dims);
            let rows = spec.output.resolve(dims);
            let limit = (6.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, spec.name));
            let data: Vec<f64> = (0..rows * fan_in)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            let index = layers.len();
            layers.push(Layer {
                name: spec.name.to_string(),
                weight: Matrix::new(rows, fan_in, data).expect("init data is finite"),
                bias: Vector::zeros(rows),
            });
            by_name.insert(spec.name, index);
            for kind in spec.members {
                let previous = bindings.insert((*kind, spec.role), index);
                debug_assert!(previous.is_none(), "duplicate binding for {kind} {:?}", spec.role);
            }
        }
        for alias in alias_specs() {
            let index = by_name[alias.target];
            bindings.insert((alias.kind, alias.role), index);
        }
        Ok(ParameterRegistry {
            dims,
            seed,
            layers,
            bindings,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Total number of scalar parameters across all layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    pub fn layer_id(&self, kind: ModuleKind, role: LayerRole) -> Option<ParamId> {
        self.bindings.get(&(kind, role)).map(|i| ParamId(*i))
    }

    pub fn require(&self, kind: ModuleKind, role: LayerRole) -> Result<ParamId, RegistryError> {
        self.layer_id(kind, role)
            .ok_or(RegistryError::MissingRole { kind, role })
    }

    pub fn layer(&self, id: ParamId) -> &Layer {
        &self.layers[id.0]
    }

    pub fn layer_mut(&mut self, id: ParamId) -> &mut Layer {
        &mut self.layers[id.0]
    }

    pub fn layers(&self) -> impl Iterator<Item = (ParamId, &Layer)> {
        self.layers.iter().enumerate().map(|(i, l)| (ParamId(i), l))
    }

    /// Plain SGD: w <- w - lr * g for every layer present in `grads`.
    /// Layers without a gradient entry are untouched.
    pub fn apply_sgd(&mut self, grads: &GradStore, learning_rate: f64) {
        for (id, grad) in grads.iter() {
            let layer = &mut self.layers[id.0];
            layer
                .weight
                .add_scaled(&grad.weight, -learning_rate)
                .expect("gradient shape matches layer");
            layer
                .bias
                .add_scaled(&grad.bias, -learning_rate)
                .expect("gradient shape matches layer");
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut file = File::create(path)?;
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut file = File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        Self::read_from(&bytes)
    }

    /// Binary layout, all integers little-endian: 8-byte magic, u32
    /// version, u32 d, u32 k, u32 answers, u64 seed, u32 layer count, then
    /// per layer: u32 name length + UTF-8 name, u32 rows, u32 cols,
    /// rows*cols f64 weights (row-major), u32 bias length, f64 biases.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), CheckpointError> {
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.dims.d as u32).to_le_bytes())?;
        out.write_all(&(self.dims.k as u32).to_le_bytes())?;
        out.write_all(&(self.dims.answers as u32).to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            let name = layer.name.as_bytes();
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name)?;
            out.write_all(&(layer.weight.rows() as u32).to_le_bytes())?;
            out.write_all(&(layer.weight.cols() as u32).to_le_bytes())?;
            for v in layer.weight.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
            out.write_all(&(layer.bias.len() as u32).to_le_bytes())?;
            for v in layer.bias.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut reader = ByteReader { bytes, pos: 0 };
        let magic = reader.take(8)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = reader.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let d = reader.u32()? as usize;
        let k = reader.u32()? as usize;
        let answers = reader.u32()? as usize;
        let seed = reader.u64()?;
        let dims = Dims { d, k, answers };
        let mut registry = ParameterRegistry::init(seed, dims)?;
        let layer_count = reader.u32()? as usize;
        if layer_count != registry.layers.len() {
            return Err(CheckpointError::MismatchedLayer {
                expected: format!("{} layers", registry.layers.len()),
                found: format!("{layer_count} layers"),
            });
        }
        for index in 0..layer_count {
            let name_len = reader.u32()? as usize;
            let name_bytes = reader.take(name_len)?;
            let name = String::from_utf8_lossy(name_bytes).into_owned();
            let expected = &registry.layers[index];
            if name != expected.name {
                return Err(CheckpointError::MismatchedLayer {
                    expected: expected.name.clone(),
                    found: name,
                });
            }
            let rows = reader.u32()? as usize;
            let cols = reader.u32()? as usize;
            if rows != expected.weight.rows() || cols != expected.weight.cols() {
                return Err(CheckpointError::BadShape {
                    name,
                    rows,
                    cols,
                    want_rows: expected.weight.rows(),
                    want_cols: expected.weight.cols(),
                });
            }
            let layer = &mut registry.layers[index];
            for i in 0..rows * cols {
                layer.weight.as_mut_slice()[i] = reader.f64()?;
            }
            let bias_len = reader.u32()? as usize;
            if bias_len != layer.bias.len() {
                return Err(CheckpointError::BadShape {
                    name: layer.name.clone(),
                    rows: bias_len,
                    cols: 1,
                    want_rows: layer.bias.len(),
                    want_cols: 1,
                });
            }
            for i in 0..bias_len {
                layer.bias.as_mut_slice()[i] = reader.f64()?;
            }
        }
        if reader.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - reader.pos));
        }
        Ok(registry)
    }
}

impl ParamAccess for ParameterRegistry {
    fn weight(&self, id: ParamId) -> &Matrix {
        &self.layers[id.0].weight
    }
    fn bias(&self, id: ParamId) -> &Vector {
        &self.layers[id.0].bias
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "checkpoint truncated",
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for byte in text.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Derives a per-layer stream seed from the registry seed and layer name.
fn mix_seed(seed: u64, name: &str) -> u64 {
    let mut z = seed ^ fnv1a(name);
    // splitmix64 finalizer.
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
