//! Netpbm maps and stimuli, PNG stimuli, and fixation CSV files.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Category, DataError, ElementKind, Fixation, FixationSet, SaliencyMap, Stimulus};

/// 8-bit binary PGM (`P5`) bytes with `round(v * 255)` quantization.
pub fn encode_pgm(map: &SaliencyMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.values().iter().map(|&v| quantize(v)));
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_map(path: impl AsRef<Path>, map: &SaliencyMap) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode_pgm(map))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<SaliencyMap, DataError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    decode_pgm(&bytes).map_err(|e| e.at(path))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<SaliencyMap, DataError> {
    let (w, h, maxval, body) = parse_header(bytes, b"P5")?;
    if body.len() < w * h {
        return Err(DataError::Header(format!(
            "P5 body holds {} bytes, need {}",
            body.len(),
            w * h
        )));
    }
    let values = body[..w * h].iter().map(|&b| b as f64 / maxval as f64).collect();
    SaliencyMap::new(w, h, values)
}

/// Binary PPM (`P6`) bytes of a stimulus.
pub fn encode_ppm(stim: &Stimulus) -> Vec<u8> {
    let (w, h) = (stim.width(), stim.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(stim.pixel(c, x, y)));
            }
        }
    }
    out
}

pub fn save_ppm(path: impl AsRef<Path>, stim: &Stimulus) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode_ppm(stim))
}

fn decode_ppm(bytes: &[u8], id: &str, category: Category) -> Result<Stimulus, DataError> {
    let (w, h, maxval, body) = parse_header(bytes, b"P6")?;
    if body.len() < 3 * w * h {
        return Err(DataError::Header(format!(
            "P6 body holds {} bytes, need {}",
            body.len(),
            3 * w * h
        )));
    }
    let mut pixels = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            pixels[c * w * h + i] = body[3 * i + c] as f64 / maxval as f64;
        }
    }
    Stimulus::new(id, w, h, pixels, category)
}

/// Loads a PPM (`P6`) or PNG stimulus.
pub fn load_stimulus(path: impl AsRef<Path>, category: Category) -> Result<Stimulus, DataError> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let bytes = read_file(path)?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes, &id, category).map_err(|e| e.at(path));
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| DataError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = vec![0.0; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            pixels[c * w * h + i] = p[c] as f64 / 255.0;
        }
    }
    Stimulus::new(id, w, h, pixels, category)
}

pub fn encode_mask(mask: &[ElementKind], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|k| k.level()));
    out
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<ElementKind>), DataError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let (w, h, _, body) = parse_header(&bytes, b"P5").map_err(|e| e.at(path))?;
    if body.len() < w * h {
        return Err(DataError::Header(format!("{}: truncated mask", path.display())));
    }
    Ok((w, h, body[..w * h].iter().map(|&b| ElementKind::from_level(b)).collect()))
}

/// Returns `(width, height, maxval, pixel bytes)`.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, usize, &'a [u8]), DataError> {
    if !bytes.starts_with(magic) {
        return Err(DataError::Header(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Header("missing width, height or maxval".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| DataError::Header("header number out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DataError::Header("no whitespace after maxval".into()));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(DataError::Header(format!("degenerate extents {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(DataError::Header(format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, maxval, &bytes[pos + 1..]))
}

/// Fixation CSV: one `x,y,observer` row per point. An optional first row
/// `x,y,observer` is treated as a header.
pub fn parse_fixations(text: &str, stimulus_id: &str) -> Result<FixationSet, DataError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('x')) {
            continue;
        }
        let bad = |reason: &str| DataError::Csv {
            line: i + 1,
            reason: format!("{reason}: {line:?}"),
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(bad("expected 3 columns"));
        }
        let num = |s: &str| -> Result<f64, DataError> {
            let v: f64 = s.parse().map_err(|_| bad("not a number"))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad("negative or non-finite value"));
            }
            Ok(v)
        };
        let (x, y) = (num(cols[0])?, num(cols[1])?);
        let observer = cols[2].parse::<u32>().map_err(|_| bad("observer is not an integer"))?;
        points.push(Fixation {
            x: x.floor() as usize,
            y: y.floor() as usize,
            observer,
        });
    }
    Ok(FixationSet::new(stimulus_id, points))
}

pub fn load_fixations(path: impl AsRef<Path>, stimulus_id: &str) -> Result<FixationSet, DataError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| DataError::Csv {
            line: 0,
            reason: format!("{} is not utf-8", path.display()),
        })?;
    parse_fixations(&text, stimulus_id).map_err(|e| e.at(path))
}

pub fn encode_fixations(fix: &FixationSet) -> String {
    let mut out = String::from("x,y,observer\n");
    for p in &fix.points {
        out.push_str(&format!("{},{},{}\n", p.x, p.y, p.observer));
    }
    out
}

pub fn save_fixations(path: impl AsRef<Path>, fix: &FixationSet) -> Result<(), DataError> {
    write_file(path.as_ref(), encode_fixations(fix).as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(bytes).map_err(|e| DataError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::io(path, e))
}
