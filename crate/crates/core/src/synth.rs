//! Synthetic conversations with known structure.
//!
//! These dumps stand in for real model exports in tests, documentation and
//! the checked-in fixture corpus. Each is built so that the expected effect
//! of every pipeline stage can be worked out by hand.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dump::{
    save_dump, Candidate, DumpError, FeatureDump, Grid, Layout, Mask, Matrix, Role, TokenRecord,
    FORMAT_VERSION,
};

struct Tok {
    record: TokenRecord,
    weight: Vec<f32>,
}

/// Assembles a dump where every token's text feature is a one-hot vector on
/// its own text channel, so `weight[text_channel(k)]` is exactly the
/// relevance of context token `k` to the token owning `weight`.
struct Builder {
    layout: Layout,
    visual_channels: usize,
    visual: Vec<Vec<f32>>,
    tokens: Vec<Tok>,
    masks: Vec<Mask>,
    images: Vec<String>,
}

impl Builder {
    fn new(layout: Layout, visual_channels: usize) -> Self {
        let n = layout.len();
        Builder {
            layout,
            visual_channels,
            visual: vec![vec![0.0; visual_channels]; n],
            tokens: Vec::new(),
            masks: Vec::new(),
            images: Vec::new(),
        }
    }

    fn set_visual(&mut self, cell: usize, channel: usize, value: f32) {
        self.visual[cell][channel] = value;
    }

    /// Adds a token; `visual` is its weight on the visual channels and
    /// `relevance` lists (earlier token position, relevance).
    fn token(&mut self, record: TokenRecord, visual: &[f32], relevance: &[(usize, f32)]) -> usize {
        let mut weight = visual.to_vec();
        weight.resize(self.visual_channels, 0.0);
        let pos = self.tokens.len();
        let mut text = vec![0.0; 0];
        for &(k, r) in relevance {
            assert!(k < pos, "relevance must point to an earlier token");
            if text.len() <= k {
                text.resize(k + 1, 0.0);
            }
            text[k] = r;
        }
        weight.extend(text);
        self.tokens.push(Tok { record, weight });
        pos
    }

    fn mask(&mut self, name: &str, frame: usize, cells: Vec<bool>) {
        self.masks.push(Mask {
            name: name.to_string(),
            frame,
            cells,
        });
    }

    fn build(self) -> FeatureDump {
        let n_tok = self.tokens.len();
        let c = self.visual_channels + n_tok;
        let pad = |mut v: Vec<f32>| {
            v.resize(c, 0.0);
            v
        };
        let visual: Vec<Vec<f32>> = self.visual.into_iter().map(pad).collect();
        let mut prompt_tokens = Vec::new();
        let mut answer_tokens = Vec::new();
        let mut prompt_rows = Vec::new();
        let mut answer_rows = Vec::new();
        let mut weights = Vec::new();
        for (k, tok) in self.tokens.into_iter().enumerate() {
            let mut feature = vec![0.0; c];
            feature[self.visual_channels + k] = 1.0;
            weights.push(pad(tok.weight));
            match tok.record.role {
                Role::Prompt => {
                    assert!(answer_tokens.is_empty(), "prompt tokens come first");
                    prompt_tokens.push(tok.record);
                    prompt_rows.push(feature);
                }
                Role::Answer => {
                    answer_tokens.push(tok.record);
                    answer_rows.push(feature);
                }
            }
        }
        let matrix = |rows: &[Vec<f32>]| {
            if rows.is_empty() {
                Matrix::zeros(0, c)
            } else {
                Matrix::from_rows(rows).expect("rows share a width")
            }
        };
        let dump = FeatureDump {
            version: FORMAT_VERSION,
            visual_features: matrix(&visual),
            prompt_features: matrix(&prompt_rows),
            answer_features: matrix(&answer_rows),
            token_weights: matrix(&weights),
            layout: self.layout,
            prompt_tokens,
            answer_tokens,
            image_refs: self.images,
            masks: self.masks,
        };
        dump.validate().expect("synthetic dump is valid");
        dump
    }
}

fn prompt(id: u32, text: &str, word: usize) -> TokenRecord {
    TokenRecord::new(id, text, word, Role::Prompt)
}

fn answer(id: u32, text: &str, word: usize, tag: &str, lemma: &str) -> TokenRecord {
    TokenRecord::new(id, text, word, Role::Answer).tagged(tag, lemma)
}

fn block(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<bool> {
    (0..h * w)
        .map(|i| rows.contains(&(i / w)) && cols.contains(&(i % w)))
        .collect()
}

/// `size` x `size` square at (`y0`, `x0`) without its four corners.
fn blob(h: usize, w: usize, y0: usize, x0: usize, size: usize) -> Vec<bool> {
    let (y1, x1) = (y0 + size - 1, x0 + size - 1);
    block(h, w, y0..y1 + 1, x0..x1 + 1)
        .into_iter()
        .enumerate()
        .map(|(i, on)| {
            let (y, x) = (i / w, i % w);
            on && !((y == y0 || y == y1) && (x == x0 || x == x1))
        })
        .collect()
}

/// Smooth low-level background peaking at (`py`, `px`), strictly positive.
fn texture(y: usize, x: usize, py: f64, px: f64) -> f32 {
    let d2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
    (0.02 + 0.03 * (-d2 / 20.0).exp()) as f32
}

const OBJ_A: usize = 0;
const OBJ_B: usize = 1;
const NOISE: usize = 2;
const TEXTURE: usize = 3;

/// Side of the planted fixture's grid.
pub const PLANTED_SIZE: usize = 10;

/// Cells of the planted "cat" region.
pub fn planted_cat_mask() -> Vec<bool> {
    blob(PLANTED_SIZE, PLANTED_SIZE, 1, 1, 4)
}

/// Cells of the planted "dog" region.
pub fn planted_dog_mask() -> Vec<bool> {
    blob(PLANTED_SIZE, PLANTED_SIZE, 5, 5, 4)
}

/// Isolated salt-noise cells shared by both object tokens.
pub const PLANTED_NOISE: [(usize, usize); 4] = [(1, 7), (7, 1), (3, 8), (9, 3)];

/// Answer positions of the planted fixture's tokens.
pub mod planted {
    pub const A: usize = 0;
    pub const CAT: usize = 1;
    pub const AND: usize = 2;
    pub const A2: usize = 3;
    pub const DOG: usize = 4;
    pub const PERIOD: usize = 5;
}

/// Caption "A cat and a dog ." over a 10x10 grid with two rounded objects.
///
/// * "cat" fires on the cat region plus salt noise.
/// * "dog" fires on the dog region, 0.8 x the cat region, and the noise;
///   its most relevant context token is "cat".
/// * "and" and "a" only carry 0.7 x / 0.6 x the cat region, borrowed from
///   "cat", which is their most relevant context token.
/// * Prompt tokens, "A" and "." see only a smooth low background texture
///   peaking in the top-right corner, away from both objects.
pub fn planted_interference() -> FeatureDump {
    let n = PLANTED_SIZE;
    let mut b = Builder::new(Layout::single(Grid::image(n, n)), 4);
    let cat = planted_cat_mask();
    let dog = planted_dog_mask();
    for cell in 0..n * n {
        let (y, x) = (cell / n, cell % n);
        b.set_visual(cell, OBJ_A, cat[cell] as u8 as f32);
        b.set_visual(cell, OBJ_B, dog[cell] as u8 as f32);
        b.set_visual(cell, NOISE, PLANTED_NOISE.contains(&(y, x)) as u8 as f32);
        b.set_visual(cell, TEXTURE, texture(y, x, 0.0, (n - 1) as f64));
    }

    let describe = b.token(prompt(100, "Describe", 0), &[0.0, 0.0, 0.0, 1.0], &[]);
    let the = b.token(prompt(101, " the", 1), &[0.0, 0.0, 0.0, 0.5], &[(describe, 0.2)]);
    let image = b.token(prompt(102, " image", 2), &[0.0, 0.0, 0.0, 1.5], &[(the, 0.4)]);
    let a = b.token(answer(103, "A", 0, "DT", "a"), &[0.0, 0.0, 0.0, 1.0], &[(describe, 0.1)]);
    let cat_tok = b.token(
        answer(104, " cat", 1, "NN", "cat"),
        &[1.0, 0.0, 0.9, 1.0],
        &[(image, 0.3)],
    );
    let and = b.token(
        answer(105, " and", 2, "CC", "and"),
        &[0.7, 0.0, 0.0, 1.0],
        &[(cat_tok, 0.5)],
    );
    let a2 = b.token(
        answer(106, " a", 3, "DT", "a"),
        &[0.6, 0.0, 0.0, 1.0],
        &[(cat_tok, 0.5), (and, 0.1)],
    );
    b.token(
        answer(107, " dog", 4, "NN", "dog"),
        &[0.8, 1.0, 0.9, 1.0],
        &[(cat_tok, 0.8), (and, 0.2), (a2, 0.1), (a, 0.0)],
    );
    b.token(answer(108, ".", 5, ".", "."), &[0.0, 0.0, 0.0, 1.0], &[(image, 0.2)]);

    b.tokens[3 + planted::DOG].record.candidates = Some(vec![
        Candidate {
            text: " dog".into(),
            confidence: 0.71,
        },
        Candidate {
            text: " puppy".into(),
            confidence: 0.18,
        },
        Candidate {
            text: " cat".into(),
            confidence: 0.04,
        },
    ]);
    b.mask("cat", 0, cat);
    b.mask("dog", 0, dog);
    b.images.push("images/0.png".into());
    b.build()
}

/// 4x4 grid, three prompt tokens and four answer tokens.
pub fn small() -> FeatureDump {
    let mut b = Builder::new(Layout::single(Grid::image(4, 4)), 2);
    let obj = block(4, 4, 1..3, 1..3);
    for (cell, &on) in obj.iter().enumerate() {
        b.set_visual(cell, 0, on as u8 as f32);
        b.set_visual(cell, 1, 0.05 + 0.01 * cell as f32);
    }
    let p0 = b.token(prompt(1, "What", 0), &[0.0, 1.0], &[]);
    let p1 = b.token(prompt(2, " is", 1), &[0.0, 0.5], &[(p0, 0.3)]);
    b.token(prompt(3, " here", 2), &[0.2, 1.0], &[(p1, 0.2)]);
    let a0 = b.token(answer(4, "A", 0, "DT", "a"), &[0.1, 1.0], &[(p0, 0.1)]);
    let a1 = b.token(answer(5, " red", 1, "JJ", "red"), &[0.5, 1.0], &[(a0, 0.2)]);
    b.token(answer(6, " box", 2, "NN", "box"), &[1.0, 0.5], &[(a1, 0.6)]);
    b.token(answer(7, ".", 3, ".", "."), &[0.0, 1.0], &[]);
    b.mask("box", 0, obj);
    b.build()
}

/// Ten 8x8 frames of a rounded ball moving along the diagonal.
pub fn video() -> FeatureDump {
    let (frames, h, w) = (10, 8, 8);
    let mut b = Builder::new(Layout::single(Grid::new(frames, h, w)), 3);
    let mut ball_masks = Vec::new();
    for f in 0..frames {
        let m = blob(h, w, f / 3 + 1, f / 2, 4);
        for (i, &on) in m.iter().enumerate() {
            let cell = f * h * w + i;
            b.set_visual(cell, 0, on as u8 as f32);
            b.set_visual(cell, 1, texture(i / w, i % w, (h - 1) as f64, 0.0));
            b.set_visual(cell, 2, (i % 13 == 6 && !on) as u8 as f32);
        }
        ball_masks.push(m);
    }
    let p0 = b.token(prompt(10, "What", 0), &[0.0, 1.0, 0.0], &[]);
    let p1 = b.token(prompt(11, " moves", 1), &[0.0, 1.2, 0.0], &[(p0, 0.2)]);
    let the = b.token(answer(12, "The", 0, "DT", "the"), &[0.0, 1.0, 0.0], &[(p1, 0.6)]);
    let ball = b.token(answer(13, " ball", 1, "NN", "ball"), &[1.0, 1.0, 0.8], &[(the, 0.2)]);
    b.token(answer(14, " rolls", 2, "VBZ", "roll"), &[0.5, 1.0, 0.0], &[(ball, 0.7)]);
    for (f, m) in ball_masks.into_iter().enumerate() {
        b.mask("ball", f, m);
        b.images.push(format!("images/{f}.png"));
    }
    b.build()
}

/// Two images of different grid sizes in one conversation.
pub fn multi_image() -> FeatureDump {
    let layout = Layout::new(vec![Grid::image(8, 8), Grid::image(10, 8)]);
    let mut b = Builder::new(layout, 4);
    let cup = blob(8, 8, 1, 3, 4);
    let plate = blob(10, 8, 5, 1, 5);
    for (i, &on) in cup.iter().enumerate() {
        b.set_visual(i, 0, on as u8 as f32);
        b.set_visual(i, 2, texture(i / 8, i % 8, 7.0, 0.0));
    }
    for (i, &on) in plate.iter().enumerate() {
        b.set_visual(64 + i, 1, on as u8 as f32);
        b.set_visual(64 + i, 2, texture(i / 8, i % 8, 0.0, 7.0));
        b.set_visual(64 + i, 3, (i == 9 || i == 30) as u8 as f32);
    }
    let p0 = b.token(prompt(20, "Compare", 0), &[0.0, 0.0, 1.0], &[]);
    let cup_tok = b.token(answer(21, " cup", 0, "NN", "cup"), &[1.0, 0.0, 1.0, 0.9], &[(p0, 0.1)]);
    let and = b.token(answer(22, " and", 1, "CC", "and"), &[0.6, 0.0, 1.0], &[(cup_tok, 0.5)]);
    b.token(
        answer(23, " plates", 2, "NNS", "plate"),
        &[0.7, 1.0, 1.0, 0.9],
        &[(cup_tok, 0.6), (and, 0.1)],
    );
    b.mask("cup", 0, cup);
    b.mask("plate", 1, plate);
    b.images.push("images/0.png".into());
    b.images.push("images/1.png".into());
    b.build()
}

/// Random dump with `n_p` prompt and `n_a` answer tokens; half of the
/// answers are nouns with a random block mask.
pub fn random_dump(seed: u64, height: usize, width: usize, n_p: usize, n_a: usize) -> FeatureDump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 6;
    let n_v = height * width;
    let gen = |rng: &mut ChaCha8Rng, rows: usize| {
        let data = (0..rows * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Matrix::new(rows, c, data).expect("sized")
    };
    let visual_features = gen(&mut rng, n_v);
    let prompt_features = gen(&mut rng, n_p);
    let answer_features = gen(&mut rng, n_a);
    let token_weights = gen(&mut rng, n_p + n_a);
    let prompt_tokens = (0..n_p)
        .map(|i| prompt(rng.gen_range(0..20), &format!("p{i}"), i))
        .collect();
    let tags = ["NN", "DT", "NNS", "CC", "JJ", "PRP"];
    let mut masks = Vec::new();
    let answer_tokens = (0..n_a)
        .map(|i| {
            let tag = tags[i % tags.len()];
            let lemma = format!("w{}", i);
            if tag.starts_with("NN") {
                let y = rng.gen_range(0..height);
                let x = rng.gen_range(0..width);
                let m = block(height, width, y..(y + 2).min(height), x..(x + 2).min(width));
                masks.push(Mask {
                    name: lemma.clone(),
                    frame: 0,
                    cells: m,
                });
            }
            answer(rng.gen_range(0..20), &format!(" w{i}"), i, tag, &lemma)
        })
        .collect();
    let dump = FeatureDump {
        version: FORMAT_VERSION,
        visual_features,
        prompt_features,
        answer_features,
        token_weights,
        layout: Layout::single(Grid::image(height, width)),
        prompt_tokens,
        answer_tokens,
        image_refs: vec![],
        masks,
    };
    dump.validate().expect("random dump is valid");
    dump
}

/// Conversation whose token maps share the map of an earlier partner in
/// proportion to their textual relevance to it.
///
/// Token `j` fires on its own random blob plus `rho_j` times the blob of a
/// random earlier partner, and `rho_j` is also the partner's relevance.
pub fn shared_interference(seed: u64, tokens: usize, size: usize) -> FeatureDump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_v = size * size;
    let mut b = Builder::new(Layout::single(Grid::image(size, size)), tokens);
    for j in 0..tokens {
        let (cy, cx) = (rng.gen_range(0..size) as f64, rng.gen_range(0..size) as f64);
        for cell in 0..n_v {
            let d2 = (((cell / size) as f64 - cy).powi(2) + ((cell % size) as f64 - cx).powi(2)) / 4.0;
            b.set_visual(cell, j, (-d2).exp() as f32);
        }
    }
    for j in 0..tokens {
        let mut visual = vec![0.0; tokens];
        visual[j] = 1.0;
        let mut relevance = Vec::new();
        if j > 0 {
            let partner = rng.gen_range(0..j);
            let rho: f32 = rng.gen_range(0.0..1.5);
            visual[partner] = rho;
            relevance.push((partner, rho));
        }
        let rec = prompt(200 + j as u32, &format!("t{j}"), j);
        b.token(rec, &visual, &relevance);
    }
    b.build()
}

/// Raster for frame `frame` of a synthetic dump: object masks tinted on a
/// light background, upscaled by `cell` pixels per grid cell.
pub fn synthetic_image(dump: &FeatureDump, frame: usize, cell: u32) -> RgbImage {
    let slot = dump.layout.frame(frame).expect("frame in layout");
    let palette = [[200u8, 120, 40], [60, 140, 200], [120, 180, 90], [180, 90, 160]];
    let names: Vec<&str> = {
        let mut v: Vec<&str> = dump.masks.iter().map(|m| m.name.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    RgbImage::from_fn(slot.width as u32 * cell, slot.height as u32 * cell, |x, y| {
        let idx = (y / cell) as usize * slot.width + (x / cell) as usize;
        let shade = 225 - ((x + y) % 16) as u8;
        let mut px = Rgb([shade, shade, shade]);
        for m in dump.masks.iter().filter(|m| m.frame == frame && m.cells[idx]) {
            let k = names.iter().position(|n| *n == m.name).unwrap_or(0) % palette.len();
            px = Rgb(palette[k]);
        }
        px
    })
}

/// Saves `dump` and, if it references images, draws them.
pub fn write_fixture(dump: &FeatureDump, dir: &Path) -> Result<(), DumpError> {
    save_dump(dump, dir)?;
    for (frame, rel) in dump.image_refs.iter().enumerate() {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| DumpError::Io {
                field: "images".into(),
                path: parent.to_path_buf(),
                source,
            })?;
        }
        synthetic_image(dump, frame, 16)
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| DumpError::Image {
                field: "images".into(),
                path: path.clone(),
                source,
            })?;
    }
    Ok(())
}

/// The named fixture corpus, in a fixed order.
pub fn corpus() -> Vec<(&'static str, FeatureDump)> {
    vec![
        ("multi_image", multi_image()),
        ("planted", planted_interference()),
        ("small", small()),
        ("video", video()),
    ]
}
