//! Visualization: question heatmaps and the answers / predictions /
//! questions montage of an episode.

use std::fs;
use std::path::Path;

use crate::color::{ColorSpaceSpec, Rgb8Image};
use crate::dataset::{encode_gray_png, write_png};
use crate::episode::EpisodeState;
use crate::error::{Error, Result};
use crate::oracle::{broadcast_hint, QuestionMap};

const GAP: usize = 2;
const GAP_COLOR: [u8; 3] = [255, 255, 255];

/// Question values mapped linearly to 0..=255.
pub fn question_to_gray8(question: &QuestionMap) -> Vec<u8> {
    question
        .tensor()
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn heatmap_png(question: &QuestionMap) -> Vec<u8> {
    encode_gray_png(question.width(), question.height(), question_to_gray8(question))
}

fn gray_to_rgb(width: usize, height: usize, gray: Vec<u8>) -> Rgb8Image {
    Rgb8Image::new(width, height, gray.into_iter().map(|g| [g, g, g]).collect()).expect("tile size")
}

/// Render each forward pass `t` as a column: the hint consumed by the pass
/// (blank for pass 0), the prediction it produced, and the question it asked.
pub fn episode_montage(state: &EpisodeState, color_space: ColorSpaceSpec) -> Result<Rgb8Image> {
    let passes = state.forward_passes();
    if passes == 0 {
        return Err(Error::State("episode has no forward passes to render".into()));
    }
    let (_, h, w) = state.input().chw();
    let mut rows: [Vec<Rgb8Image>; 3] = Default::default();
    for t in 0..passes {
        let hint = if t == 0 {
            gray_to_rgb(w, h, crate::color::lightness_to_gray8(state.input()))
        } else {
            let c = broadcast_hint(&state.question_history()[t - 1], &state.answer_history()[t - 1]);
            color_space.from_model_space(c.tensor(), state.input())?
        };
        rows[0].push(hint);
        rows[1].push(color_space.from_model_space(&state.prediction_history()[t], state.input())?);
        rows[2].push(gray_to_rgb(w, h, question_to_gray8(&state.question_history()[t])));
    }
    let out_w = passes * w + (passes - 1) * GAP;
    let out_h = 3 * h + 2 * GAP;
    let mut pixels = vec![GAP_COLOR; out_w * out_h];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (y0, x0) = (r * (h + GAP), c * (w + GAP));
            for i in 0..h {
                for j in 0..w {
                    pixels[(y0 + i) * out_w + x0 + j] = tile.get(i, j);
                }
            }
        }
    }
    Rgb8Image::new(out_w, out_h, pixels)
}

/// Montage plus one PNG per prediction and heatmap, named `{prefix}_*.png`.
pub fn write_episode_dump(dir: &Path, prefix: &str, state: &EpisodeState, color_space: ColorSpaceSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join(format!("{prefix}_montage.png")), &episode_montage(state, color_space)?)?;
    for (t, (pred, q)) in state
        .prediction_history()
        .iter()
        .zip(state.question_history())
        .enumerate()
    {
        write_png(
            &dir.join(format!("{prefix}_prediction_{t}.png")),
            &color_space.from_model_space(pred, state.input())?,
        )?;
        let path = dir.join(format!("{prefix}_question_{t}.png"));
        fs::write(&path, heatmap_png(q)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
