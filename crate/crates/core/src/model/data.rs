//! Synthetic shape images with template captions, and their on-disk form
//! (binary PGM files plus a JSON index).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Caption, Vocab};
use crate::numerics::{seeded_rng, Tensor};

/// Template length: `a <intensity> <shape> on the <position> <eos>`.
pub const CAPTION_LEN: usize = 7;

const SIDE: usize = 16;
const BACKGROUND: f64 = 0.5;
const NOISE: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Dark,
    Bright,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Triangle,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Left,
    Center,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShapeClass {
    pub intensity: Intensity,
    pub shape: ShapeKind,
    pub position: Placement,
}

impl ShapeClass {
    pub fn all() -> Vec<ShapeClass> {
        let mut out = Vec::with_capacity(18);
        for intensity in [Intensity::Dark, Intensity::Bright] {
            for shape in [ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Bar] {
                for position in [Placement::Left, Placement::Center, Placement::Right] {
                    out.push(ShapeClass {
                        intensity,
                        shape,
                        position,
                    });
                }
            }
        }
        out
    }

    pub fn words(&self) -> [&'static str; 6] {
        let intensity = match self.intensity {
            Intensity::Dark => "dark",
            Intensity::Bright => "bright",
        };
        let shape = match self.shape {
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
        };
        let position = match self.position {
            Placement::Left => "left",
            Placement::Center => "center",
            Placement::Right => "right",
        };
        ["a", intensity, shape, "on", "the", position]
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    pub fn caption(&self, vocab: &Vocab) -> Result<Caption> {
        vocab.encode(&self.text(), true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[16, 16]` grayscale image, values multiples of 1/255.
    pub image: Tensor,
    pub caption: Caption,
    pub class: ShapeClass,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render<R: Rng>(class: ShapeClass, rng: &mut R) -> Tensor {
    let mut px = vec![0.0; SIDE * SIDE];
    for p in px.iter_mut() {
        *p = BACKGROUND + rng.gen_range(-NOISE..=NOISE);
    }
    let fill = match class.intensity {
        Intensity::Dark => 0.1,
        Intensity::Bright => 0.9,
    };
    let cx: i64 = match class.position {
        Placement::Left => 3,
        Placement::Center => 8,
        Placement::Right => 12,
    } + rng.gen_range(-1..=1);
    let cy: i64 = 7 + rng.gen_range(-1..=1);
    let cells: Vec<(i64, i64)> = match class.shape {
        ShapeKind::Square => (-2..=2)
            .flat_map(|dy| (-2..=2).map(move |dx| (dx, dy)))
            .collect(),
        ShapeKind::Triangle => (0..6i64)
            .flat_map(|row| {
                let half = row / 2;
                (-half..=half).map(move |dx| (dx, row - 3))
            })
            .collect(),
        ShapeKind::Bar => (-4..4)
            .flat_map(|dy| (0..2).map(move |dx| (dx - 1, dy)))
            .collect(),
    };
    for (dx, dy) in cells {
        let (x, y) = (cx + dx, cy + dy);
        if (0..SIDE as i64).contains(&x) && (0..SIDE as i64).contains(&y) {
            px[y as usize * SIDE + x as usize] = fill + rng.gen_range(-NOISE..=NOISE);
        }
    }
    let px = px.into_iter().map(quantize).collect();
    Tensor::new(vec![SIDE, SIDE], px).expect("rendered image is finite")
}

/// `n` rendered samples. Classes are dealt from shuffled blocks of all 18
/// so every class appears once `n >= 18`.
pub fn gen_synthetic(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    let vocab = Vocab::synthetic();
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(n);
    let mut block = Vec::new();
    while out.len() < n {
        if block.is_empty() {
            block = ShapeClass::all();
            block.shuffle(&mut rng);
        }
        let class = block.pop().expect("refilled above");
        let image = render(class, &mut rng);
        out.push(Sample {
            image,
            caption: class.caption(&vocab)?,
            class,
        });
    }
    Ok(out)
}

/// Writes a `P5` image with maxval 255.
pub fn write_pgm<W: Write>(w: &mut W, image: &Tensor) -> Result<()> {
    let [rows, cols] = match image.shape() {
        [r, c] => [*r, *c],
        s => {
            return Err(Error::Dimension(format!(
                "PGM needs a 2-D image, got {s:?}"
            )))
        }
    };
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn pgm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0] as char;
        if c == '#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(tok)
}

pub fn read_pgm<R: Read>(r: R) -> Result<Tensor> {
    let mut r = BufReader::new(r);
    if pgm_token(&mut r)? != "P5" {
        return Err(Error::Format("only binary P5 PGM is supported".into()));
    }
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let cols = parse(pgm_token(&mut r)?)?;
    let rows = parse(pgm_token(&mut r)?)?;
    let maxval = parse(pgm_token(&mut r)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let mut bytes = vec![0u8; rows * cols];
    r.read_exact(&mut bytes)?;
    let data = bytes.iter().map(|&b| b as f64 / maxval as f64).collect();
    Tensor::new(vec![rows, cols], data)
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    caption: String,
    tokens: Vec<usize>,
    class: ShapeClass,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    vocab: Vec<String>,
    items: Vec<IndexEntry>,
}

/// Directory layout: `images/NNNNN.pgm`, `index.json`, `vocab.txt`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let vocab = Vocab::synthetic();
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut items = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("images/{i:05}.pgm");
        let mut f = fs::File::create(dir.join(&file))?;
        write_pgm(&mut f, &s.image)?;
        items.push(IndexEntry {
            file,
            caption: vocab.decode(s.caption.tokens()),
            tokens: s.caption.0.clone(),
            class: s.class,
        });
    }
    let index = DatasetIndex {
        vocab: vocab.tokens().to_vec(),
        items,
    };
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    fs::write(dir.join("vocab.txt"), vocab.to_text())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    let vocab = Vocab::new(index.vocab)?;
    index
        .items
        .into_iter()
        .map(|item| {
            let path: PathBuf = dir.join(&item.file);
            let image = read_pgm(fs::File::open(&path)?)?;
            let caption = Caption(item.tokens);
            caption.validate(vocab.len())?;
            Ok(Sample {
                image,
                caption,
                class: item.class,
            })
        })
        .collect()
}
