//! Binary checkpoints for heads and continual-learning state.
//!
//! All integers and floats are little-endian; floats are raw IEEE-754 bits so
//! a round trip is bit-exact. Matrices are written row-major (`h` rows of `k`
//! values). Strings are a `u32` byte length followed by UTF-8.
//!
//! Head file:
//!
//! ```text
//! b"CCFIHEAD"  u32 version
//! u64 h  u64 k  k x string class id
//! h*k f64 weights
//! u8 has_adam
//!   [u64 step  f64 step_size  f64 beta1  f64 beta2  f64 epsilon
//!    h*k f64 first moment  h*k f64 second moment]
//! ```
//!
//! State file:
//!
//! ```text
//! b"CCFISTAT"  u32 version  u64 round
//! <head block, including Adam>
//! h*k f64 anchor  h*k f64 table
//! f64 rate  u64 class count
//!   per class: string id  u64 item count
//!     per item: u64 index  f64 score  u64 len  len x f64 features
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::classifier::{AdamConfig, AdamState, ClassId, LabeledExample, SoftmaxHead};
use crate::consolidation::{AnchorWeights, ContinualState};
use crate::error::{Error, Result};
use crate::fisher::{ClassExemplars, ExemplarStore, ParameterInfoTable, ScoredExample};
use crate::linalg::Matrix;

const HEAD_MAGIC: &[u8; 8] = b"CCFIHEAD";
const STATE_MAGIC: &[u8; 8] = b"CCFISTAT";
pub const FORMAT_VERSION: u32 = 1;

// Guards against allocating from a corrupt length field.
const MAX_LEN: u64 = 1 << 32;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_bits().to_le_bytes())
    }
    fn string(&mut self, s: &str) -> Result<()> {
        let len = u32::try_from(s.len()).map_err(|_| Error::Checkpoint("string too long".into()))?;
        self.u32(len)?;
        self.bytes(s.as_bytes())
    }
    fn matrix(&mut self, m: &Matrix<f64>) -> Result<()> {
        for v in m.to_row_major() {
            self.f64(v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::Checkpoint(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf).map_err(truncated)?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("class id is not UTF-8".into()))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("matrix size overflows".into()))?;
        let values = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_row_major(rows, cols, &values)
    }
    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got: [u8; 8] = self.array()?;
        if &got != expected {
            return Err(Error::Checkpoint(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(expected)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        Ok(())
    }
    fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.0.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Checkpoint("trailing bytes".into())),
        }
    }
}

fn truncated(err: std::io::Error) -> Error {
    if err.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Io(err)
    }
}

fn write_head_block<W: Write>(w: &mut Writer<W>, head: &SoftmaxHead<f64>, adam: Option<&AdamState<f64>>) -> Result<()> {
    let (h, k) = head.weights().shape();
    w.u64(h as u64)?;
    w.u64(k as u64)?;
    for id in head.class_ids() {
        w.string(id.as_str())?;
    }
    w.matrix(head.weights())?;
    match adam {
        None => w.u8(0),
        Some(adam) => {
            if adam.shape() != (h, k) {
                return Err(Error::ShapeMismatch {
                    left_rows: h,
                    left_cols: k,
                    right_rows: adam.shape().0,
                    right_cols: adam.shape().1,
                });
            }
            w.u8(1)?;
            w.u64(adam.step)?;
            let c = adam.config;
            for v in [c.step_size, c.beta1, c.beta2, c.epsilon] {
                w.f64(v)?;
            }
            w.matrix(&adam.first)?;
            w.matrix(&adam.second)
        }
    }
}

fn read_head_block<R: Read>(r: &mut Reader<R>) -> Result<(SoftmaxHead<f64>, Option<AdamState<f64>>)> {
    let h = r.len()?;
    let k = r.len()?;
    let ids = (0..k)
        .map(|_| r.string().map(ClassId::new))
        .collect::<Result<Vec<_>>>()?;
    let weights = r.matrix(h, k)?;
    let head = SoftmaxHead::from_weights(weights, ids)?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                step_size: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                epsilon: r.f64()?,
            };
            let first = r.matrix(h, k)?;
            let second = r.matrix(h, k)?;
            Some(AdamState {
                config,
                first,
                second,
                step,
            })
        }
        other => return Err(Error::Checkpoint(format!("bad Adam flag {other}"))),
    };
    Ok((head, adam))
}

/// Serializes a head and optional optimizer state.
pub fn write_head<W: Write>(out: W, head: &SoftmaxHead<f64>, adam: Option<&AdamState<f64>>) -> Result<()> {
    let mut w = Writer(out);
    w.bytes(HEAD_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    write_head_block(&mut w, head, adam)?;
    w.0.flush()?;
    Ok(())
}

pub fn read_head<R: Read>(input: R) -> Result<(SoftmaxHead<f64>, Option<AdamState<f64>>)> {
    let mut r = Reader(input);
    r.magic(HEAD_MAGIC)?;
    let out = read_head_block(&mut r)?;
    r.finish()?;
    Ok(out)
}

pub fn save_head(path: &Path, head: &SoftmaxHead<f64>, adam: Option<&AdamState<f64>>) -> Result<()> {
    write_head(BufWriter::new(File::create(path)?), head, adam)
}

pub fn load_head(path: &Path) -> Result<(SoftmaxHead<f64>, Option<AdamState<f64>>)> {
    read_head(BufReader::new(File::open(path)?))
}

/// Serializes the full state carried between rounds.
pub fn write_state<W: Write>(out: W, state: &ContinualState<f64>) -> Result<()> {
    state.check_invariants()?;
    let mut w = Writer(out);
    w.bytes(STATE_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u64(state.round as u64)?;
    write_head_block(&mut w, &state.head, Some(&state.adam))?;
    w.matrix(state.anchor.weights())?;
    w.matrix(state.table.values())?;
    w.f64(state.exemplars.rate())?;
    w.u64(state.exemplars.classes().len() as u64)?;
    for bucket in state.exemplars.classes() {
        w.string(bucket.class.as_str())?;
        w.u64(bucket.items.len() as u64)?;
        for item in &bucket.items {
            w.u64(item.index as u64)?;
            w.f64(item.score)?;
            w.u64(item.example.features.len() as u64)?;
            for &v in &item.example.features {
                w.f64(v)?;
            }
        }
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_state<R: Read>(input: R) -> Result<ContinualState<f64>> {
    let mut r = Reader(input);
    r.magic(STATE_MAGIC)?;
    let round = r.len()?;
    let (head, adam) = read_head_block(&mut r)?;
    let adam = adam.ok_or_else(|| Error::Checkpoint("state checkpoint lacks Adam moments".into()))?;
    let (h, k) = head.weights().shape();
    let anchor = AnchorWeights::from_matrix(r.matrix(h, k)?)?;
    let table = ParameterInfoTable::from_matrix(r.matrix(h, k)?)?;
    let rate = r.f64()?;
    let n_classes = r.len()?;
    let mut buckets = Vec::with_capacity(n_classes.min(1024));
    for _ in 0..n_classes {
        let class = ClassId::new(r.string()?);
        let n = r.len()?;
        let mut items = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let index = r.len()?;
            let score = r.f64()?;
            let len = r.len()?;
            let features = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            items.push(ScoredExample {
                index,
                example: LabeledExample::new(features, class.clone())?,
                score,
            });
        }
        buckets.push(ClassExemplars { class, items });
    }
    r.finish()?;
    let state = ContinualState {
        head,
        adam,
        table,
        anchor,
        exemplars: ExemplarStore::from_classes(rate, buckets)?,
        round,
    };
    state.check_invariants()?;
    Ok(state)
}

pub fn save_state(path: &Path, state: &ContinualState<f64>) -> Result<()> {
    write_state(BufWriter::new(File::create(path)?), state)
}

pub fn load_state(path: &Path) -> Result<ContinualState<f64>> {
    read_state(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{adam_step, AdamConfig};
    use crate::fisher::{SelectionConfig, Selector};
    use crate::rng::Rng;

    fn ids(k: usize) -> Vec<ClassId> {
        (0..k).map(|i| ClassId::new(format!("c{i}"))).collect()
    }

    fn trained_head(rng: &mut Rng) -> (SoftmaxHead<f64>, AdamState<f64>) {
        let mut head = SoftmaxHead::random(4, ids(3), 1.0, rng).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_step_size(1e-2), &head);
        let data: Vec<_> = (0..6)
            .map(|i| {
                LabeledExample::new((0..4).map(|_| rng.normal(0.0, 1.0)).collect(), format!("c{}", i % 3)).unwrap()
            })
            .collect();
        for _ in 0..3 {
            let g = head.nll_gradient(&data).unwrap();
            adam_step(&mut head, &mut adam, &g).unwrap();
        }
        (head, adam)
    }

    #[test]
    fn head_round_trip_is_bit_exact() {
        let mut rng = Rng::new(11);
        let (mut head, adam) = trained_head(&mut rng);
        head.weights_mut().set(0, 0, f64::MIN_POSITIVE / 4.0);
        head.weights_mut().set(1, 2, -0.0);
        let mut buf = Vec::new();
        write_head(&mut buf, &head, Some(&adam)).unwrap();
        let (h2, a2) = read_head(buf.as_slice()).unwrap();
        let bits = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(head.weights()), bits(h2.weights()));
        assert_eq!(head.class_ids(), h2.class_ids());
        let a2 = a2.unwrap();
        assert_eq!(bits(&adam.first), bits(&a2.first));
        assert_eq!(bits(&adam.second), bits(&a2.second));
        assert_eq!(adam.step, a2.step);
        assert_eq!(adam.config, a2.config);

        let mut buf = Vec::new();
        write_head(&mut buf, &head, None).unwrap();
        assert!(read_head(buf.as_slice()).unwrap().1.is_none());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut rng = Rng::new(12);
        let (head, adam) = trained_head(&mut rng);
        let mut buf = Vec::new();
        write_head(&mut buf, &head, Some(&adam)).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_head(bad.as_slice()), Err(Error::Checkpoint(_))));
        assert!(matches!(read_head(&buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_head(long.as_slice()), Err(Error::Checkpoint(_))));
        let mut version = buf.clone();
        version[8] = 9;
        assert!(matches!(read_head(version.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn state_round_trip() {
        let mut rng = Rng::new(13);
        let (head, adam) = trained_head(&mut rng);
        let data: Vec<_> = (0..30)
            .map(|i| {
                LabeledExample::new((0..4).map(|_| rng.normal(0.0, 1.0)).collect(), format!("c{}", i % 3)).unwrap()
            })
            .collect();
        let mut state = ContinualState::after_initial_training(
            head,
            adam,
            &data,
            Selector::Fisher,
            &SelectionConfig::new(0.2),
            &mut rng,
        )
        .unwrap();
        state.extend_classes([ClassId::from("new")], 0.02, &mut rng).unwrap();
        state.round = 1;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        save_state(&path, &state).unwrap();
        let back = load_state(&path).unwrap();
        assert_eq!(back, state);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_state(&mut a, &state).unwrap();
        write_state(&mut b, &back).unwrap();
        assert_eq!(a, b);
    }
}
