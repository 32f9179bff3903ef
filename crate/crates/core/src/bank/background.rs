use super::BankError;
use crate::layout::{CategoryId, ChannelSpace, LabelMap, SegMap, Taxonomy};

const UNSET: u8 = 0;
const PENDING: u8 = 1;
const DONE: u8 = 2;

/// Reassigns every non-background pixel to the category of its nearest
/// background pixel (4-neighbour path length), smaller id on ties.
///
/// Grows all background regions one ring at a time; a pixel reached in ring
/// `d` takes the smallest id among its ring `d - 1` neighbours, which is the
/// smallest id among the background pixels at distance `d`.
pub fn fill_background(segmap: &SegMap, taxonomy: &Taxonomy) -> Result<SegMap, BankError> {
    let canvas = segmap.canvas();
    let (h, w) = (canvas.height, canvas.width);
    let mut out = segmap.data().to_vec();
    let mut state = vec![UNSET; out.len()];
    let mut frontier = Vec::new();
    for (p, &v) in out.iter().enumerate() {
        if taxonomy.background_index(CategoryId(v)).is_some() {
            state[p] = DONE;
            frontier.push(p);
        }
    }
    if frontier.is_empty() {
        return Err(BankError::DegenerateBackground(String::new()));
    }
    let mut next = Vec::new();
    while !frontier.is_empty() {
        for &p in &frontier {
            let (r, c) = (p / w, p % w);
            let label = out[p];
            let mut reach = |q: usize| match state[q] {
                UNSET => {
                    state[q] = PENDING;
                    out[q] = label;
                    next.push(q);
                }
                PENDING if label < out[q] => out[q] = label,
                _ => {}
            };
            if r > 0 {
                reach(p - w);
            }
            if r + 1 < h {
                reach(p + w);
            }
            if c > 0 {
                reach(p - 1);
            }
            if c + 1 < w {
                reach(p + 1);
            }
        }
        for &q in &next {
            state[q] = DONE;
        }
        std::mem::swap(&mut frontier, &mut next);
        next.clear();
    }
    Ok(SegMap::new(canvas, out)?)
}

/// `M_b`: `C_b` channels with exactly one set per pixel.
pub fn split_background(segmap: &SegMap, taxonomy: &Taxonomy) -> Result<LabelMap, BankError> {
    Ok(one_hot_background(&fill_background(segmap, taxonomy)?, taxonomy))
}

pub(crate) fn one_hot_background(filled: &SegMap, taxonomy: &Taxonomy) -> LabelMap {
    let c_b = taxonomy.c_b();
    let mut data = vec![0u16; filled.data().len() * c_b];
    for (p, &v) in filled.data().iter().enumerate() {
        let ch = taxonomy.background_index(CategoryId(v)).expect("filled map is background only");
        data[p * c_b + ch] = 1;
    }
    LabelMap::from_raw(filled.canvas(), c_b, ChannelSpace::Background, data).expect("extents match")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Canvas, Category};
    use proptest::prelude::*;

    fn toy_taxonomy() -> Taxonomy {
        let cat = |id: u8| Category {
            id: CategoryId(id),
            name: format!("c{id}"),
        };
        Taxonomy::new("toy", vec![cat(10), cat(11)], vec![cat(1), cat(2), cat(3)]).unwrap()
    }

    /// Brute force: scan every background pixel for each foreground pixel.
    fn nearest_oracle(s: &SegMap, t: &Taxonomy) -> Vec<u8> {
        let c = s.canvas();
        let bg: Vec<(usize, usize, u8)> = (0..c.height)
            .flat_map(|r| (0..c.width).map(move |col| (r, col)))
            .filter(|&(r, col)| t.background_index(s.get(r, col)).is_some())
            .map(|(r, col)| (r, col, s.get(r, col).0))
            .collect();
        (0..c.pixels())
            .map(|p| {
                let (r, col) = (p / c.width, p % c.width);
                let v = s.data()[p];
                if t.background_index(CategoryId(v)).is_some() {
                    return v;
                }
                bg.iter()
                    .map(|&(br, bc, id)| (br.abs_diff(r) + bc.abs_diff(col), id))
                    .min()
                    .unwrap()
                    .1
            })
            .collect()
    }

    #[test]
    fn uniform_background_stays() {
        let t = Taxonomy::cityscapes();
        let s = SegMap::filled(Canvas::new(4, 6), CategoryId(23));
        let mb = split_background(&s, &t).unwrap();
        let ch = t.background_index(CategoryId(23)).unwrap();
        assert!(mb.data().chunks(t.c_b()).all(|px| px[ch] == 1 && px.iter().sum::<u16>() == 1));
    }

    #[test]
    fn enclosed_foreground_becomes_road() {
        let t = Taxonomy::cityscapes();
        let mut s = SegMap::filled(Canvas::new(9, 9), CategoryId(7));
        s.fill_rect(2, 2, 7, 7, CategoryId(26));
        let f = fill_background(&s, &t).unwrap();
        assert!(f.data().iter().all(|&v| v == 7));
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let t = toy_taxonomy();
        // a single foreground pixel between id 3 (left) and id 2 (right)
        let s = SegMap::new(Canvas::new(1, 3), vec![3, 10, 2]).unwrap();
        assert_eq!(fill_background(&s, &t).unwrap().data(), &[3, 2, 2]);
    }

    #[test]
    fn all_foreground_is_degenerate() {
        let t = toy_taxonomy();
        let s = SegMap::filled(Canvas::new(3, 3), CategoryId(10));
        assert!(matches!(fill_background(&s, &t), Err(BankError::DegenerateBackground(_))));
    }

    proptest! {
        #[test]
        fn matches_nearest_oracle_and_is_one_hot(
            h in 1usize..10,
            w in 1usize..10,
            cells in prop::collection::vec(prop::sample::select(vec![1u8, 2, 3, 10, 11, 10, 11]), 100),
        ) {
            let t = toy_taxonomy();
            let mut data: Vec<u8> = cells[..h * w].to_vec();
            if !data.iter().any(|&v| v < 10) {
                data[0] = 2;
            }
            let s = SegMap::new(Canvas::new(h, w), data).unwrap();
            let f = fill_background(&s, &t).unwrap();
            prop_assert_eq!(f.data(), &nearest_oracle(&s, &t)[..]);
            let mb = split_background(&s, &t).unwrap();
            prop_assert!(mb.data().chunks(t.c_b()).all(|px| px.iter().sum::<u16>() == 1));
        }
    }
}
