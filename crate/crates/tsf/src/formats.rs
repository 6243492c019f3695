//! On-disk formats.
//!
//! # TSFDS1 (datasets)
//!
//! ```text
//! TSFDS1 <num> <ch> <H> <W>\n
//! repeated <num> times:
//!     <class_id> <split>\n            split is base | val | novel
//!     ch*H*W little-endian f64        channel-major, then rows
//! ```
//!
//! # TSFCKPT1 (checkpoints)
//!
//! ```text
//! TSFCKPT1\n
//! config <bytes>\n <bytes of RunConfig text>
//! model <in_channels> <image_size> <global_classes>\n
//! params <count>\n
//! repeated <count> times:
//!     <name> <rank> <d0> ... <d(rank-1)>\n
//!     prod(d) little-endian f64
//! end\n
//! ```
//!
//! Writers are deterministic, so equal inputs give byte-identical files.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use tsf_core::data::{DatasetBundle, Split};
use tsf_core::params::ParamStore;
use tsf_core::patchproto::PatchProto;
use tsf_core::Tensor;

use crate::config::RunConfig;

const DS_MAGIC: &str = "TSFDS1";
const CKPT_MAGIC: &str = "TSFCKPT1";

fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).context("truncated binary segment")?;
    Ok(buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    ensure!(n > 0, "unexpected end of file");
    ensure!(line.ends_with('\n'), "unterminated header line {line:?}");
    line.pop();
    Ok(line)
}

fn fields<const N: usize>(line: &str, what: &str) -> Result<[usize; N]> {
    let parts: Vec<&str> = line.split(' ').collect();
    ensure!(parts.len() == N, "{what}: expected {N} fields in {line:?}");
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().with_context(|| format!("{what}: bad number {p:?}"))?;
    }
    Ok(out)
}

pub fn write_dataset(w: &mut impl Write, bundle: &DatasetBundle) -> Result<()> {
    let s = bundle.images.shape();
    writeln!(w, "{DS_MAGIC} {} {} {} {}", s[0], s[1], s[2], s[3])?;
    let per = s[1] * s[2] * s[3];
    for i in 0..bundle.len() {
        writeln!(w, "{} {}", bundle.class_ids[i], bundle.splits[i])?;
        write_f64s(w, &bundle.images.data()[i * per..(i + 1) * per])?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl BufRead) -> Result<DatasetBundle> {
    let header = read_line(r)?;
    let rest = header
        .strip_prefix(DS_MAGIC)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| anyhow!("not a {DS_MAGIC} file"))?;
    let [num, ch, h, w] = fields::<4>(rest, "dataset header")?;
    let per = ch * h * w;
    let mut data = Vec::with_capacity(num * per);
    let (mut ids, mut splits) = (Vec::with_capacity(num), Vec::with_capacity(num));
    for i in 0..num {
        let line = read_line(r).with_context(|| format!("image {i}"))?;
        let (id, split) = line.split_once(' ').ok_or_else(|| anyhow!("image {i}: bad record {line:?}"))?;
        ids.push(id.parse::<usize>().with_context(|| format!("image {i}: class id {id:?}"))?);
        splits.push(split.parse::<Split>()?);
        data.extend(read_f64s(r, per).with_context(|| format!("image {i}"))?);
    }
    let mut trailing = [0u8; 1];
    ensure!(r.read(&mut trailing)? == 0, "trailing bytes after {num} images");
    Ok(DatasetBundle::new(Tensor::new(&[num, ch, h, w], data)?, ids, splits)?)
}

pub fn save_dataset(path: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_dataset(&mut w, bundle)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(&mut BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// A trained model with the run configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: PatchProto,
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let text = self.config.to_text();
        let m = &self.model.config;
        writeln!(w, "{CKPT_MAGIC}")?;
        writeln!(w, "config {}", text.len())?;
        w.write_all(text.as_bytes())?;
        writeln!(w, "model {} {} {}", m.in_channels, m.image_size, m.global_classes)?;
        writeln!(w, "params {}", self.model.params.len())?;
        for (name, t) in self.model.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "{name} {} {}", t.rank(), dims.join(" "))?;
            write_f64s(w, t.data())?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read(r: &mut impl BufRead) -> Result<Self> {
        ensure!(read_line(r)? == CKPT_MAGIC, "not a {CKPT_MAGIC} file");
        let line = read_line(r)?;
        let len: usize = line
            .strip_prefix("config ")
            .ok_or_else(|| anyhow!("expected config block, got {line:?}"))?
            .parse()?;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).context("truncated config block")?;
        let config = RunConfig::parse(std::str::from_utf8(&text)?)?;
        let line = read_line(r)?;
        let [in_channels, image_size, global_classes] =
            fields::<3>(line.strip_prefix("model ").ok_or_else(|| anyhow!("expected model line"))?, "model line")?;
        let line = read_line(r)?;
        let [count] = fields::<1>(line.strip_prefix("params ").ok_or_else(|| anyhow!("expected params line"))?, "params line")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let line = read_line(r)?;
            let mut parts = line.split(' ');
            let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| anyhow!("bad tensor header {line:?}"))?;
            let rank: usize = parts.next().ok_or_else(|| anyhow!("missing rank in {line:?}"))?.parse()?;
            let shape = parts.map(str::parse).collect::<std::result::Result<Vec<usize>, _>>()?;
            ensure!(shape.len() == rank, "tensor {name}: rank {rank} with dims {shape:?}");
            let n = shape.iter().product();
            params.insert(name, Tensor::new(&shape, read_f64s(r, n)?)?)?;
        }
        ensure!(read_line(r)? == "end", "missing end marker");
        let mut trailing = [0u8; 1];
        ensure!(r.read(&mut trailing)? == 0, "trailing bytes after end marker");
        let model_config = config.model_config(in_channels, image_size, global_classes);
        let model = PatchProto::from_params(model_config, params)?;
        Ok(Self { config, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Self::read(&mut BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
    }
}

/// Rejects a dataset whose image geometry does not match a checkpoint.
pub fn check_compatible(ckpt: &Checkpoint, bundle: &DatasetBundle) -> Result<()> {
    let (ch, h, w) = bundle.image_dims();
    let m = &ckpt.model.config;
    if ch != m.in_channels || h != m.image_size || w != m.image_size {
        bail!(
            "dataset images are {ch}x{h}x{w} but the checkpoint expects {}x{}x{}",
            m.in_channels,
            m.image_size,
            m.image_size
        );
    }
    Ok(())
}
