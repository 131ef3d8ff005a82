//! Checkpoints: a plain-text manifest followed by one raw tensor dump per
//! manifest entry.
//!
//! ```text
//! QNCHECKPOINT v1
//! precision f32
//! model.kind quotient
//! ...
//! meta norm.mean 0.4914 0.4822 0.4465
//! tensor head.conv.weight 16x3x3x3
//! ...
//! end
//! <QNTENSOR dumps in manifest order>
//! ```
//!
//! Floating-point header values use Rust's shortest round-trip formatting, so
//! save followed by load is bitwise exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{build, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::layers::{ActivationSpec, Module};
use crate::tensor::{read_tensor_dump, write_tensor_dump, Element, Tensor};

pub const CHECKPOINT_MAGIC: &str = "QNCHECKPOINT v1";

pub fn write_checkpoint<T: Element, W: Write>(out: &mut W, net: &Network<T>, meta: &[(String, String)]) -> Result<()> {
    let c = &net.config;
    let mut h = String::new();
    h.push_str(CHECKPOINT_MAGIC);
    h.push('\n');
    h.push_str(&format!("precision {}\n", T::NAME));
    h.push_str(&format!("model.kind {}\n", c.kind));
    h.push_str(&format!("model.depth {}\n", c.depth));
    h.push_str(&format!("model.base_channels {}\n", c.base_channels));
    h.push_str(&format!("model.num_classes {}\n", c.num_classes));
    h.push_str(&format!("model.alpha {:?}\n", c.alpha));
    let q = c.quotient_activation.as_ref().map_or_else(|| "default".to_string(), ActivationSpec::encode);
    h.push_str(&format!("model.quotient_activation {q}\n"));
    h.push_str(&format!("model.inner_activation {}\n", c.inner_activation.encode()));
    h.push_str(&format!("model.head_uses_quotient_activation {}\n", c.head_uses_quotient_activation));
    h.push_str(&format!("model.shortcuts_use_quotient_activation {}\n", c.shortcuts_use_quotient_activation));
    h.push_str(&format!("model.batch_norm {}\n", c.batch_norm));
    h.push_str(&format!("model.seed {}\n", c.seed));
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::InvalidArgument(format!("checkpoint metadata `{k}` is not a single-line key/value")));
        }
        h.push_str(&format!("meta {k} {v}\n"));
    }
    let tensors = net.named_tensors();
    for (name, _, t) in &tensors {
        let dims: Vec<String> = t.dims().iter().map(usize::to_string).collect();
        h.push_str(&format!("tensor {name} {}\n", dims.join("x")));
    }
    h.push_str("end\n");
    out.write_all(h.as_bytes())?;
    for (_, _, t) in &tensors {
        write_tensor_dump(out, t)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint<T: Element>(path: &Path, net: &Network<T>, meta: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, net, meta)
}

/// A network with its `meta` entries in file order.
pub type Loaded<T> = (Network<T>, Vec<(String, String)>);

pub fn read_checkpoint<T: Element, R: BufRead>(input: &mut R) -> Result<Loaded<T>> {
    let mut offset = 0usize;
    let mut next_line = |input: &mut R| -> Result<(usize, String)> {
        let mut line = String::new();
        let start = offset;
        let n = input.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::Format { offset: start, message: "checkpoint header ends without `end`".into() });
        }
        offset += n;
        Ok((start, line.trim_end_matches('\n').to_string()))
    };
    let (_, magic) = next_line(input)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("expected `{CHECKPOINT_MAGIC}`, found `{magic}`") });
    }

    let mut fields: HashMap<String, (usize, String)> = HashMap::new();
    let mut meta = Vec::new();
    let mut manifest: Vec<(usize, String, Vec<usize>)> = Vec::new();
    loop {
        let (at, line) = next_line(input)?;
        if line == "end" {
            break;
        }
        let fmt_err = |m: String| Error::Format { offset: at, message: m };
        let (key, rest) = line.split_once(' ').ok_or_else(|| fmt_err(format!("malformed header line `{line}`")))?;
        match key {
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            }
            "tensor" => {
                let (name, dims) =
                    rest.split_once(' ').ok_or_else(|| fmt_err(format!("malformed tensor line `{line}`")))?;
                let dims = dims
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| fmt_err(format!("bad extents in `{line}`"))))
                    .collect::<Result<Vec<_>>>()?;
                manifest.push((at, name.to_string(), dims));
            }
            _ => {
                fields.insert(key.to_string(), (at, rest.to_string()));
            }
        }
    }

    let field = |k: &str| -> Result<&(usize, String)> {
        fields.get(k).ok_or_else(|| Error::Format { offset: 0, message: format!("checkpoint header lacks `{k}`") })
    };
    let parse = |k: &str| -> Result<String> { Ok(field(k)?.1.clone()) };
    fn num<V: std::str::FromStr>(k: &str, v: String) -> Result<V> {
        v.parse().map_err(|_| Error::InvalidConfig { key: k.into(), message: format!("cannot parse `{v}`") })
    }

    let precision = parse("precision")?;
    if precision != T::NAME {
        return Err(Error::InvalidArgument(format!(
            "checkpoint stores {precision} tensors but {} was requested",
            T::NAME
        )));
    }
    let quotient = parse("model.quotient_activation")?;
    let config = NetworkConfig {
        kind: parse("model.kind")?.parse()?,
        depth: num("model.depth", parse("model.depth")?)?,
        base_channels: num("model.base_channels", parse("model.base_channels")?)?,
        num_classes: num("model.num_classes", parse("model.num_classes")?)?,
        alpha: num("model.alpha", parse("model.alpha")?)?,
        quotient_activation: if quotient == "default" { None } else { Some(ActivationSpec::decode(&quotient)?) },
        inner_activation: ActivationSpec::decode(&parse("model.inner_activation")?)?,
        head_uses_quotient_activation: num(
            "model.head_uses_quotient_activation",
            parse("model.head_uses_quotient_activation")?,
        )?,
        shortcuts_use_quotient_activation: num(
            "model.shortcuts_use_quotient_activation",
            parse("model.shortcuts_use_quotient_activation")?,
        )?,
        batch_norm: num("model.batch_norm", parse("model.batch_norm")?)?,
        seed: num("model.seed", parse("model.seed")?)?,
    };
    let mut net: Network<T> = build(&config)?;

    let expected: Vec<(String, Vec<usize>)> =
        net.named_tensors().into_iter().map(|(n, _, t)| (n, t.dims().to_vec())).collect();
    if expected.len() != manifest.len() {
        return Err(Error::Format {
            offset,
            message: format!(
                "manifest lists {} tensors, the configured network has {}",
                manifest.len(),
                expected.len()
            ),
        });
    }
    for ((at, name, dims), (ename, edims)) in manifest.iter().zip(&expected) {
        if name != ename || dims != edims {
            return Err(Error::Format {
                offset: *at,
                message: format!("manifest entry {name} {dims:?} does not match network tensor {ename} {edims:?}"),
            });
        }
    }

    let mut loaded: HashMap<String, Tensor<T>> = HashMap::with_capacity(manifest.len());
    for (_, name, dims) in &manifest {
        let t: Tensor<T> = read_tensor_dump(input)?;
        if t.dims() != dims.as_slice() {
            return Err(Error::Format { offset, message: format!("dump for {name} has shape {}", t.shape()) });
        }
        loaded.insert(name.clone(), t);
    }
    for (name, p) in net.named_params_mut() {
        p.value = loaded.remove(&name).expect("manifest checked against network");
    }
    for (name, b) in net.named_buffers_mut() {
        *b = loaded.remove(&name).expect("manifest checked against network");
    }
    Ok((net, meta))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Loaded<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
