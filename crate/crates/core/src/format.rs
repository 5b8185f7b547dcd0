//! ENID binary model files.
//!
//! Layout (all integers little-endian): magic `ENID`, format version u16,
//! model kind u8 (0 float, 1 quantized), family tag u8 + two u32 family
//! parameters, layer count u32, then per-layer records (kind byte, shape
//! fields, tensor data). Float models carry f64 tensors; quantized models
//! carry i8 weights, i32 biases and per-tensor scale/zero-point records.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    input_shape_for, Activation, ConvLayer, DenseLayer, FamilySpec, Layer, Network,
};
use crate::quantizer::{QuantConv, QuantDense, QuantLayer, QuantParams, QuantizedModel};

pub const MAGIC: &[u8; 4] = b"ENID";
pub const FORMAT_VERSION: u16 = 1;

const KIND_FLOAT: u8 = 0;
const KIND_QUANT: u8 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.f64(v);
        }
    }
    fn i8s(&mut self, vs: &[i8]) {
        self.u32(vs.len() as u32);
        self.buf.extend(vs.iter().map(|&v| v as u8));
    }
    fn i32s(&mut self, vs: &[i32]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.i32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of model file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
    fn i8s(&mut self) -> Result<Vec<i8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.iter().map(|&b| b as i8).collect())
    }
    fn i32s(&mut self) -> Result<Vec<i32>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.i32()).collect()
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes in model file".into()));
        }
        Ok(())
    }
}

fn family_tag(spec: FamilySpec) -> u8 {
    match spec {
        FamilySpec::Ff { .. } => 0,
        FamilySpec::CnnSmall { .. } => 1,
        FamilySpec::CnnDeep { .. } => 2,
    }
}

fn family_from(tag: u8, p1: u32, p2: u32) -> Result<FamilySpec> {
    match tag {
        0 => FamilySpec::from_parts("ff", p1, p2),
        1 => FamilySpec::from_parts("cnn_small", p1, p2),
        2 => FamilySpec::from_parts("cnn_deep", p1, p2),
        other => Err(Error::Format(format!("unknown family tag {other}"))),
    }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Softmax => 1,
    }
}

fn activation_from(tag: u8) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Softmax),
        other => Err(Error::Format(format!("unknown activation tag {other}"))),
    }
}

fn header(w: &mut Writer, kind: u8, family: FamilySpec, layer_count: usize) {
    w.buf.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(kind);
    w.u8(family_tag(family));
    let (p1, p2) = family.params();
    w.u32(p1);
    w.u32(p2);
    w.u32(layer_count as u32);
}

fn read_header(r: &mut Reader, expect_kind: u8) -> Result<(FamilySpec, usize)> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not an ENID model file".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let kind = r.u8()?;
    if kind != expect_kind {
        return Err(Error::Format(format!(
            "expected {} model, found {}",
            if expect_kind == KIND_FLOAT { "float" } else { "quantized" },
            if kind == KIND_FLOAT { "float" } else { "quantized" }
        )));
    }
    let tag = r.u8()?;
    let p1 = r.u32()?;
    let p2 = r.u32()?;
    let family = family_from(tag, p1, p2)?;
    let layer_count = r.u32()? as usize;
    Ok((family, layer_count))
}

pub fn network_to_bytes(net: &Network) -> Vec<u8> {
    let mut w = Writer::new();
    header(&mut w, KIND_FLOAT, net.family, net.layers.len());
    for layer in &net.layers {
        match layer {
            Layer::Dense(d) => {
                w.u8(0);
                w.u32(d.in_width as u32);
                w.u32(d.out_width as u32);
                w.u8(activation_tag(d.activation));
                w.f64s(&d.weights);
                w.f64s(&d.bias);
            }
            Layer::Conv2d(c) => {
                w.u8(1);
                w.u32(c.kernel as u32);
                w.u32(c.in_channels as u32);
                w.u32(c.out_channels as u32);
                w.f64s(&c.weights);
                w.f64s(&c.bias);
            }
            Layer::MaxPool2x2 => w.u8(2),
            Layer::Flatten => w.u8(3),
        }
    }
    w.buf
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes);
    let (family, layer_count) = read_header(&mut r, KIND_FLOAT)?;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let layer = match r.u8()? {
            0 => {
                let in_width = r.u32()? as usize;
                let out_width = r.u32()? as usize;
                let activation = activation_from(r.u8()?)?;
                let weights = r.f64s()?;
                let bias = r.f64s()?;
                if weights.len() != in_width * out_width || bias.len() != out_width {
                    return Err(Error::Format("dense tensor size mismatch".into()));
                }
                Layer::Dense(DenseLayer {
                    in_width,
                    out_width,
                    activation,
                    weights,
                    bias,
                })
            }
            1 => {
                let kernel = r.u32()? as usize;
                let in_channels = r.u32()? as usize;
                let out_channels = r.u32()? as usize;
                let weights = r.f64s()?;
                let bias = r.f64s()?;
                if weights.len() != kernel * kernel * in_channels * out_channels
                    || bias.len() != out_channels
                {
                    return Err(Error::Format("conv tensor size mismatch".into()));
                }
                Layer::Conv2d(ConvLayer {
                    kernel,
                    in_channels,
                    out_channels,
                    weights,
                    bias,
                })
            }
            2 => Layer::MaxPool2x2,
            3 => Layer::Flatten,
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    r.done()?;
    let net = Network {
        family,
        input: input_shape_for(family),
        layers,
    };
    net.shapes()?;
    Ok(net)
}

fn write_qparams(w: &mut Writer, p: QuantParams) {
    w.f64(p.scale);
    w.i32(p.zero_point);
}

fn read_qparams(r: &mut Reader) -> Result<QuantParams> {
    Ok(QuantParams {
        scale: r.f64()?,
        zero_point: r.i32()?,
    })
}

pub fn quantized_to_bytes(q: &QuantizedModel) -> Vec<u8> {
    let mut w = Writer::new();
    header(&mut w, KIND_QUANT, q.family, q.layers.len());
    write_qparams(&mut w, q.input);
    for layer in &q.layers {
        match layer {
            QuantLayer::Dense(d) => {
                w.u8(0);
                w.u32(d.in_width as u32);
                w.u32(d.out_width as u32);
                w.u8(activation_tag(d.activation));
                w.i8s(&d.weights);
                w.i32s(&d.bias);
                write_qparams(&mut w, d.weight);
                write_qparams(&mut w, d.output);
            }
            QuantLayer::Conv2d(c) => {
                w.u8(1);
                w.u32(c.kernel as u32);
                w.u32(c.in_channels as u32);
                w.u32(c.out_channels as u32);
                w.i8s(&c.weights);
                w.i32s(&c.bias);
                write_qparams(&mut w, c.weight);
                write_qparams(&mut w, c.output);
            }
            QuantLayer::MaxPool2x2 => w.u8(2),
            QuantLayer::Flatten => w.u8(3),
        }
    }
    w.buf
}

pub fn quantized_from_bytes(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader::new(bytes);
    let (family, layer_count) = read_header(&mut r, KIND_QUANT)?;
    let input = read_qparams(&mut r)?;
    let mut layers = Vec::with_capacity(layer_count);
    let mut params = 0usize;
    for _ in 0..layer_count {
        let layer = match r.u8()? {
            0 => {
                let in_width = r.u32()? as usize;
                let out_width = r.u32()? as usize;
                let activation = activation_from(r.u8()?)?;
                let weights = r.i8s()?;
                let bias = r.i32s()?;
                if weights.len() != in_width * out_width || bias.len() != out_width {
                    return Err(Error::Format("dense tensor size mismatch".into()));
                }
                params += weights.len() + bias.len();
                QuantLayer::Dense(QuantDense {
                    in_width,
                    out_width,
                    activation,
                    weights,
                    bias,
                    weight: read_qparams(&mut r)?,
                    output: read_qparams(&mut r)?,
                })
            }
            1 => {
                let kernel = r.u32()? as usize;
                let in_channels = r.u32()? as usize;
                let out_channels = r.u32()? as usize;
                let weights = r.i8s()?;
                let bias = r.i32s()?;
                if weights.len() != kernel * kernel * in_channels * out_channels
                    || bias.len() != out_channels
                {
                    return Err(Error::Format("conv tensor size mismatch".into()));
                }
                params += weights.len() + bias.len();
                QuantLayer::Conv2d(QuantConv {
                    kernel,
                    in_channels,
                    out_channels,
                    weights,
                    bias,
                    weight: read_qparams(&mut r)?,
                    output: read_qparams(&mut r)?,
                })
            }
            2 => QuantLayer::MaxPool2x2,
            3 => QuantLayer::Flatten,
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    r.done()?;
    Ok(QuantizedModel {
        family,
        input_shape: input_shape_for(family),
        input,
        layers,
        size_kib: crate::model::size_kib_for_params(params),
    })
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::UnwritableOutput(format!("{}: {e}", path.display())))?;
    f.write_all(&network_to_bytes(net))?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    network_from_bytes(&bytes)
}

pub fn save_quantized(q: &QuantizedModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::UnwritableOutput(format!("{}: {e}", path.display())))?;
    f.write_all(&quantized_to_bytes(q))?;
    Ok(())
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    quantized_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_flows;
    use crate::model::{build_cnn_small, build_ff};
    use crate::quantizer::calibrate_and_quantize;

    #[test]
    fn float_model_round_trip() {
        for net in [build_ff(2, 5).unwrap(), build_cnn_small(8, 4, 5).unwrap()] {
            let bytes = network_to_bytes(&net);
            assert_eq!(&bytes[..4], MAGIC);
            let back = network_from_bytes(&bytes).unwrap();
            assert_eq!(net, back);
        }
    }

    #[test]
    fn quantized_model_round_trip() {
        let net = build_cnn_small(8, 3, 2).unwrap();
        let data = synth_flows(128, 0.5, 2).unwrap();
        let q = calibrate_and_quantize(&net, &data).unwrap();
        let bytes = quantized_to_bytes(&q);
        let back = quantized_from_bytes(&bytes).unwrap();
        assert_eq!(q, back);
    }

    #[test]
    fn identical_builds_serialize_bit_identically() {
        let a = network_to_bytes(&build_ff(4, 9).unwrap());
        let b = network_to_bytes(&build_ff(4, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(network_from_bytes(b"NOPE").is_err());
        let net = build_ff(1, 1).unwrap();
        let mut bytes = network_to_bytes(&net);
        bytes[0] = b'X';
        assert!(network_from_bytes(&bytes).is_err());
        // float payload read as quantized
        let bytes = network_to_bytes(&net);
        assert!(quantized_from_bytes(&bytes).is_err());
        // truncation
        let bytes = network_to_bytes(&net);
        assert!(network_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
