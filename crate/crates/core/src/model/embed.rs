use super::ModelParams;
use crate::data::{ScaleSchedule, TokenMap, TokenPyramid};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Nearest-neighbour source index of every cell of a `to` grid within a
/// `from` grid, under floor-ratio indexing, row-major.
pub fn upsample_indices(from: (usize, usize), to: (usize, usize)) -> Vec<usize> {
    let (fh, fw) = from;
    let (th, tw) = to;
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let r = i * fh / th;
        for j in 0..tw {
            out.push(r * fw + j * fw / tw);
        }
    }
    out
}

/// Row ids into the stacked `[tok_emb; class_emb]` table for the input
/// positions of scale `k` (1-based).
fn step_ids(
    schedule: &ScaleSchedule,
    k: usize,
    prev: Option<&TokenMap>,
    class_label: u32,
) -> Result<Vec<usize>> {
    if k == 0 || k > schedule.scales() {
        return Err(Error::Contract(format!(
            "scale {k} outside 1..={}",
            schedule.scales()
        )));
    }
    match (k, prev) {
        (1, None) => Ok(vec![schedule.vocab() + class_label as usize]),
        (1, Some(_)) => Err(Error::Contract("scale 1 takes no previous map".into())),
        (_, None) => Err(Error::Contract(format!("scale {k} needs the scale {} map", k - 1))),
        (_, Some(map)) => {
            let from = schedule.grid(k - 1);
            if (map.h, map.w) != from || map.tokens.len() != from.0 * from.1 {
                return Err(Error::Contract(format!(
                    "scale {k} expects a {}x{} previous map, got {}x{}",
                    from.0, from.1, map.h, map.w
                )));
            }
            if let Some(&t) = map.tokens.iter().find(|&&t| t as usize >= schedule.vocab()) {
                return Err(Error::Index(format!("token {t} outside vocabulary")));
            }
            Ok(upsample_indices(from, schedule.grid(k))
                .into_iter()
                .map(|i| map.tokens[i] as usize)
                .collect())
        }
    }
}

/// Table ids of the whole teacher-forced input sequence of `pyramid`.
pub fn input_ids(schedule: &ScaleSchedule, pyramid: &TokenPyramid) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(schedule.total_tokens());
    for k in 1..=schedule.scales() {
        let prev = if k == 1 { None } else { pyramid.maps.get(k - 2) };
        ids.extend(step_ids(schedule, k, prev, pyramid.class_label)?);
    }
    Ok(ids)
}

pub(crate) fn embedding_table(params: &ModelParams) -> Tensor {
    ops::concat(&[&params.tok_emb, &params.class_emb], 0).expect("same width")
}

/// Input embeddings `[h_k·w_k, width]` of scale `k` (1-based): the class
/// start token at `k = 1`, otherwise the upsampled token embeddings of
/// `prev`; plus the scale's positional table.
pub fn embed_step(
    params: &ModelParams,
    k: usize,
    prev: Option<&TokenMap>,
    class_label: u32,
) -> Result<Tensor> {
    let cfg = &params.config;
    if class_label as usize >= cfg.classes {
        return Err(Error::Index(format!(
            "class {class_label} outside {} classes",
            cfg.classes
        )));
    }
    let ids = step_ids(&cfg.schedule, k, prev, class_label)?;
    let table = embedding_table(params);
    let x = ops::gather_rows(&table, &ids)?;
    ops::add(&x, &params.pos_emb[k - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn two_by_two_to_three_by_three() {
        assert_eq!(upsample_indices((2, 2), (3, 3)), vec![0, 0, 1, 0, 0, 1, 2, 2, 3]);
        assert_eq!(upsample_indices((1, 1), (2, 2)), vec![0; 4]);
        assert_eq!(upsample_indices((2, 2), (4, 4))[..4], [0, 0, 1, 1]);
    }

    #[test]
    fn first_scale_is_class_plus_position() {
        let p = init_params(&ModelConfig::toy(), 5).unwrap();
        let x = embed_step(&p, 1, None, 3).unwrap();
        let w = p.config.width;
        assert_eq!(x.shape(), &[1, w]);
        for j in 0..w {
            let want = p.class_emb.data()[3 * w + j] + p.pos_emb[0].data()[j];
            assert_eq!(x.data()[j], want);
        }
    }

    #[test]
    fn constant_map_differs_only_by_position() {
        let p = init_params(&ModelConfig::toy(), 5).unwrap();
        let prev = TokenMap::new(1, 1, vec![7]).unwrap();
        let x = embed_step(&p, 2, Some(&prev), 0).unwrap();
        let w = p.config.width;
        for pos in 0..4 {
            for j in 0..w {
                let tok = x.data()[pos * w + j] - p.pos_emb[1].data()[pos * w + j];
                assert!((tok - p.tok_emb.data()[7 * w + j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn contract_errors() {
        let p = init_params(&ModelConfig::toy(), 5).unwrap();
        let one = TokenMap::new(1, 1, vec![0]).unwrap();
        assert!(matches!(embed_step(&p, 1, Some(&one), 0), Err(Error::Contract(_))));
        assert!(matches!(embed_step(&p, 2, None, 0), Err(Error::Contract(_))));
        assert!(matches!(embed_step(&p, 3, Some(&one), 0), Err(Error::Contract(_))));
        assert!(matches!(embed_step(&p, 0, None, 0), Err(Error::Contract(_))));
        assert!(matches!(embed_step(&p, 1, None, 99), Err(Error::Index(_))));
    }
}
