//! Predictor selection from the command line and the subprocess protocol.
//!
//! Spec strings:
//! - `gt`
//! - `corrupt:scale=1.3,gamma=1.1,bias=0.2,noise=0.01` (any subset)
//! - `calibrated:<params.json>`; the file may name its base predictor in a
//!   `"base"` field, otherwise `gt`
//! - `exec:<program> [args…]`
//!
//! Wire protocol for `exec:` predictors, one exchange per image: the request
//! is a u64 little-endian byte count followed by that many PNG bytes on the
//! child's stdin; the response is a u64 little-endian byte count followed by
//! a PDR1 raster on its stdout.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use panocal_core::calibration::{CalibratedPredictor, CorrectionParams};
use panocal_core::predictor::{CorruptionSpec, MockPredictor};
use panocal_core::scene::Scene;
use panocal_core::{DepthMap, DepthPredictor, Error, Panorama};
use serde::{Deserialize, Serialize};

use crate::formats::{decode_pdr, encode_pdr, encode_png, read_json};

pub type BoxedPredictor = Box<dyn DepthPredictor + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorSpec {
    Gt,
    Corrupt(CorruptionSpec),
    Calibrated { params: CorrectionParams, base: Box<PredictorSpec> },
    Exec(Vec<String>),
}

/// Calibration output file: correction parameters plus the base predictor
/// they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub log_scale: f64,
    pub gamma: f64,
    pub band_bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
}

impl ParamsFile {
    pub fn params(&self) -> CorrectionParams {
        CorrectionParams { log_scale: self.log_scale, gamma: self.gamma, band_bias: self.band_bias.clone() }
    }
}

pub fn parse_corruption(text: &str) -> Result<CorruptionSpec> {
    let mut c = CorruptionSpec::IDENTITY;
    for part in text.split(',').filter(|s| !s.trim().is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| anyhow!("corruption term `{part}` is not key=value"))?;
        let v: f64 = v.trim().parse().with_context(|| format!("corruption value in `{part}`"))?;
        match k.trim() {
            "scale" => c.scale = v,
            "gamma" => c.gamma_d = v,
            "bias" => c.latitude_bias = v,
            "noise" => c.noise_std = v,
            other => bail!("unknown corruption key `{other}` (scale, gamma, bias, noise)"),
        }
    }
    c.validate()?;
    Ok(c)
}

impl PredictorSpec {
    pub fn parse(text: &str) -> Result<Self> {
        if text == "gt" {
            return Ok(PredictorSpec::Gt);
        }
        if let Some(rest) = text.strip_prefix("corrupt:") {
            return Ok(PredictorSpec::Corrupt(parse_corruption(rest)?));
        }
        if let Some(path) = text.strip_prefix("calibrated:") {
            let file: ParamsFile = read_json(Path::new(path))?;
            let base = match &file.base {
                Some(b) => PredictorSpec::parse(b)?,
                None => PredictorSpec::Gt,
            };
            let params = file.params();
            params.validate()?;
            return Ok(PredictorSpec::Calibrated { params, base: Box::new(base) });
        }
        if let Some(cmd) = text.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                bail!("exec: needs a program");
            }
            return Ok(PredictorSpec::Exec(argv));
        }
        bail!("unknown predictor `{text}` (gt | corrupt:<spec> | calibrated:<params.json> | exec:<program>)")
    }

    /// The spec string of the uncalibrated predictor underneath.
    pub fn base_string(&self) -> String {
        match self {
            PredictorSpec::Gt => "gt".into(),
            PredictorSpec::Corrupt(c) => {
                format!("corrupt:scale={},gamma={},bias={},noise={}", c.scale, c.gamma_d, c.latitude_bias, c.noise_std)
            }
            PredictorSpec::Calibrated { base, .. } => base.base_string(),
            PredictorSpec::Exec(argv) => format!("exec:{}", argv.join(" ")),
        }
    }

    pub fn needs_scene(&self) -> bool {
        match self {
            PredictorSpec::Gt | PredictorSpec::Corrupt(_) => true,
            PredictorSpec::Calibrated { base, .. } => base.needs_scene(),
            PredictorSpec::Exec(_) => false,
        }
    }

    /// Builds the predictor with no calibration layer on top.
    pub fn build_base(&self, scene: Option<&Arc<Scene>>) -> Result<BoxedPredictor> {
        let scene_for = |c: CorruptionSpec| -> Result<BoxedPredictor> {
            let s = scene.ok_or_else(|| anyhow!("predictor `{}` needs --scene", self.base_string()))?;
            Ok(Box::new(MockPredictor::new(s.clone(), c)))
        };
        match self {
            PredictorSpec::Gt => scene_for(CorruptionSpec::IDENTITY),
            PredictorSpec::Corrupt(c) => scene_for(*c),
            PredictorSpec::Calibrated { base, .. } => base.build_base(scene),
            PredictorSpec::Exec(argv) => Ok(Box::new(SubprocessPredictor::spawn(argv)?)),
        }
    }

    /// Calibratable wrapper around the base, carrying the spec's parameters
    /// (identity unless `calibrated:`).
    pub fn build(&self, scene: Option<&Arc<Scene>>) -> Result<CalibratedPredictor<BoxedPredictor>> {
        let base = self.build_base(scene)?;
        Ok(match self {
            PredictorSpec::Calibrated { params, .. } => CalibratedPredictor::with_params(base, params.clone()),
            _ => CalibratedPredictor::new(base),
        })
    }
}

struct Pipe {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
}

/// Depth predictor served by an external process.
pub struct SubprocessPredictor {
    pipe: Mutex<Pipe>,
}

impl SubprocessPredictor {
    pub fn spawn(argv: &[String]) -> Result<Self> {
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .with_context(|| format!("spawning predictor `{}`", argv[0]))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(SubprocessPredictor { pipe: Mutex::new(Pipe { child, stdin: Some(stdin), stdout }) })
    }

    fn exchange(&self, png: &[u8]) -> Result<Vec<u8>> {
        let mut pipe = self.pipe.lock().map_err(|_| anyhow!("predictor pipe poisoned"))?;
        let stdin = pipe.stdin.as_mut().ok_or_else(|| anyhow!("predictor stdin closed"))?;
        write_frame(stdin, png)?;
        stdin.flush()?;
        read_frame(&mut pipe.stdout)?.ok_or_else(|| anyhow!("predictor closed its output"))
    }
}

impl DepthPredictor for SubprocessPredictor {
    fn predict(&self, image: &Panorama) -> panocal_core::Result<DepthMap> {
        let run = || -> Result<DepthMap> {
            let depth = decode_pdr(&self.exchange(&encode_png(image)?)?)?;
            if depth.width() != image.width() || depth.height() != image.height() {
                bail!("predictor returned {}×{} for a {}×{} image", depth.width(), depth.height(), image.width(), image.height());
            }
            Ok(depth)
        };
        run().map_err(|e| Error::Predictor(format!("{e:#}")))
    }
}

impl Drop for SubprocessPredictor {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            pipe.stdin.take();
            let _ = pipe.child.wait();
        }
    }
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

/// `None` on a clean end of stream before a frame starts.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        let n = r.read(&mut len[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            bail!("truncated frame header");
        }
        got += n;
    }
    let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Server side of the protocol: answers every request with `respond`.
pub fn serve(input: &mut impl Read, output: &mut impl Write, respond: impl Fn(&Panorama) -> Result<DepthMap>) -> Result<()> {
    while let Some(frame) = read_frame(input)? {
        let image = crate::formats::decode_png(&frame)?;
        write_frame(output, &encode_pdr(&respond(&image)?))?;
        output.flush()?;
    }
    Ok(())
}
