use super::{
    BitmapBuilder, BoundingBox, CategoryBitmap, CategoryId, ChannelSpace, LabelMap, LayoutError, Run, SalientLayout, SegMap, Slot,
    Taxonomy, Violation,
};

/// Collects every finding; never fails.
pub fn validate_layout(layout: &SalientLayout, taxonomy: &Taxonomy) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if layout.taxonomy != taxonomy.name() {
        v.push(Violation::TaxonomyMismatch {
            layout: layout.taxonomy.clone(),
            taxonomy: taxonomy.name().to_string(),
        });
    }
    if layout.canvas.pixels() == 0 {
        v.push(Violation::EmptyCanvas);
    }
    if layout.boxes.is_empty() {
        v.push(Violation::EmptyLayout);
    }
    for (index, b) in layout.boxes.iter().enumerate() {
        match taxonomy.slot(b.category) {
            None => v.push(Violation::UnknownCategory {
                index,
                category: b.category,
            }),
            Some(Slot::Background(_)) => v.push(Violation::NotForeground {
                index,
                category: b.category,
            }),
            Some(Slot::Foreground(_)) => {}
        }
        if b.h < 1 || b.w < 1 {
            v.push(Violation::NonPositiveExtent { index });
        } else if b.clip(layout.canvas).is_none() {
            v.push(Violation::OutOfCanvas { index });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Foreground label map: channel `c` at a pixel counts the category-`c`
/// boxes covering it. Boxes are clipped to the canvas.
pub fn rasterize_layout(layout: &SalientLayout, taxonomy: &Taxonomy) -> Result<LabelMap, LayoutError> {
    if let Err(found) = validate_layout(layout, taxonomy) {
        // unknown ids surface as taxonomy errors, everything else as a validation error
        if let Some(Violation::UnknownCategory { category, .. }) = found.iter().find(|x| matches!(x, Violation::UnknownCategory { .. })) {
            return Err(LayoutError::UnknownCategory(*category));
        }
        return Err(LayoutError::Invalid(found));
    }
    let mut map = LabelMap::zeros(layout.canvas, taxonomy.c_o(), ChannelSpace::Foreground);
    for b in &layout.boxes {
        let ch = taxonomy.foreground_index(b.category).expect("validated");
        let r = b.clip(layout.canvas).expect("validated");
        for row in r.row0..r.row1 {
            for col in r.col0..r.col1 {
                map.pixel_mut(row, col)[ch] += 1;
            }
        }
    }
    Ok(map)
}

/// Tightest box around a non-empty pixel set.
pub fn extract_bbox(pixels: &CategoryBitmap) -> Result<BoundingBox, LayoutError> {
    let runs = pixels.runs();
    let (Some(first), Some(last)) = (runs.first(), runs.last()) else {
        return Err(LayoutError::EmptyInstance(pixels.category()));
    };
    let w = pixels.canvas().width as u32;
    let row0 = first.start / w;
    let row1 = (last.start + last.len - 1) / w;
    let (mut col0, mut col1) = (u32::MAX, 0);
    for r in runs {
        let (a, b) = (r.start, r.start + r.len - 1);
        if a / w != b / w {
            // spans a row boundary, so touches both the first and last column
            col0 = 0;
            col1 = w - 1;
            break;
        }
        col0 = col0.min(a % w);
        col1 = col1.max(b % w);
    }
    Ok(BoundingBox::new(
        pixels.category(),
        col0 as i32,
        row0 as i32,
        (row1 - row0 + 1) as i32,
        (col1 - col0 + 1) as i32,
    ))
}

/// Pixel set where a category is present, collapsing instance multiplicity.
pub trait CategoryUnion {
    fn category_union(&self, taxonomy: &Taxonomy, category: CategoryId) -> Result<CategoryBitmap, LayoutError>;
}

impl CategoryUnion for SalientLayout {
    fn category_union(&self, taxonomy: &Taxonomy, category: CategoryId) -> Result<CategoryBitmap, LayoutError> {
        if taxonomy.slot(category).is_none() {
            return Err(LayoutError::UnknownCategory(category));
        }
        let w = self.canvas.width;
        let runs = self
            .boxes
            .iter()
            .filter(|b| b.category == category)
            .filter_map(|b| b.clip(self.canvas))
            .flat_map(|r| {
                (r.row0..r.row1).map(move |row| Run {
                    start: (row * w + r.col0) as u32,
                    len: (r.col1 - r.col0) as u32,
                })
            })
            .collect();
        Ok(CategoryBitmap::from_runs(category, self.canvas, runs))
    }
}

impl CategoryUnion for LabelMap {
    fn category_union(&self, taxonomy: &Taxonomy, category: CategoryId) -> Result<CategoryBitmap, LayoutError> {
        let slot = taxonomy.slot(category).ok_or(LayoutError::UnknownCategory(category))?;
        let channel = match (self.space(), slot) {
            (ChannelSpace::Foreground, Slot::Foreground(i)) => Some(i),
            (ChannelSpace::Background, Slot::Background(i)) => Some(i),
            (ChannelSpace::Composed, Slot::Background(i)) => Some(i),
            (ChannelSpace::Composed, Slot::Foreground(i)) => Some(taxonomy.c_b() + i),
            _ => None,
        };
        match channel {
            Some(c) if c < self.channels() => Ok(self.channel_bitmap(c, category)),
            Some(_) => Err(LayoutError::Channels {
                expected: self.channels(),
                actual: taxonomy.c_b() + taxonomy.c_o(),
            }),
            None => Ok(CategoryBitmap::empty(category, self.canvas())),
        }
    }
}

impl CategoryUnion for SegMap {
    fn category_union(&self, taxonomy: &Taxonomy, category: CategoryId) -> Result<CategoryBitmap, LayoutError> {
        if taxonomy.slot(category).is_none() {
            return Err(LayoutError::UnknownCategory(category));
        }
        let mut b = BitmapBuilder::new(category, self.canvas());
        for (p, &v) in self.data().iter().enumerate() {
            if v == category.0 {
                b.push(p as u32, 1);
            }
        }
        Ok(b.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::super::Canvas;
    use super::*;
    use proptest::prelude::*;

    const CAR: CategoryId = CategoryId(26);
    const PERSON: CategoryId = CategoryId(24);

    fn layout(canvas: Canvas, boxes: Vec<BoundingBox>) -> SalientLayout {
        SalientLayout::new(canvas, "cityscapes", boxes)
    }

    #[test]
    fn single_box_sets_four_pixels() {
        let t = Taxonomy::cityscapes();
        let l = layout(Canvas::new(4, 4), vec![BoundingBox::new(CAR, 1, 1, 2, 2)]);
        let m = rasterize_layout(&l, &t).unwrap();
        let ch = t.foreground_index(CAR).unwrap();
        let set: Vec<_> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| m.pixel_sum(r, c) > 0)
            .collect();
        assert_eq!(set, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert!(set.iter().all(|&(r, c)| m.get(r, c, ch) == 1));
    }

    #[test]
    fn identical_boxes_count_twice() {
        let t = Taxonomy::cityscapes();
        let b = BoundingBox::new(CAR, 0, 0, 2, 3);
        let m = rasterize_layout(&layout(Canvas::new(4, 4), vec![b, b]), &t).unwrap();
        assert_eq!(m.get(1, 2, t.foreground_index(CAR).unwrap()), 2);
        assert_eq!(m.pixel_sum(1, 2), 2);
        assert_eq!(m.pixel_sum(2, 2), 0);
    }

    #[test]
    fn rasterize_errors() {
        let t = Taxonomy::cityscapes();
        let c = Canvas::new(4, 4);
        let unknown = layout(c, vec![BoundingBox::new(CategoryId(99), 0, 0, 1, 1)]);
        assert_eq!(rasterize_layout(&unknown, &t), Err(LayoutError::UnknownCategory(CategoryId(99))));
        let outside = layout(c, vec![BoundingBox::new(CAR, 5, 0, 1, 1)]);
        assert_eq!(
            rasterize_layout(&outside, &t),
            Err(LayoutError::Invalid(vec![Violation::OutOfCanvas { index: 0 }]))
        );
    }

    #[test]
    fn validation_findings() {
        let t = Taxonomy::cityscapes();
        let c = Canvas::new(8, 8);
        assert!(validate_layout(&layout(c, vec![BoundingBox::new(CAR, 1, 1, 3, 3)]), &t).is_ok());
        let bad = layout(
            c,
            vec![
                BoundingBox::new(CAR, 0, 0, 2, 0),
                BoundingBox::new(CAR, -9, 0, 2, 2),
                BoundingBox::new(CategoryId(7), 0, 0, 2, 2),
            ],
        );
        let v = validate_layout(&bad, &t).unwrap_err();
        assert_eq!(v[0].to_string(), "box 0: non-positive extent");
        assert_eq!(v[1].to_string(), "box 1: out of canvas");
        assert_eq!(
            v[2],
            Violation::NotForeground {
                index: 2,
                category: CategoryId(7)
            }
        );
        assert_eq!(validate_layout(&layout(c, vec![]), &t).unwrap_err(), vec![Violation::EmptyLayout]);
    }

    #[test]
    fn extract_bbox_cases() {
        let c = Canvas::new(10, 10);
        let single = CategoryBitmap::from_pixels(CAR, c, [(3, 5)]);
        assert_eq!(extract_bbox(&single).unwrap(), BoundingBox::new(CAR, 5, 3, 1, 1));
        // L shape: a vertical bar at column 1 rows 2..=6 and a foot along row 6
        let l_shape: Vec<_> = (2..=6).map(|r| (r, 1)).chain((1..=4).map(|c| (6, c))).collect();
        let b = CategoryBitmap::from_pixels(CAR, c, l_shape);
        assert_eq!(extract_bbox(&b).unwrap(), BoundingBox::new(CAR, 1, 2, 5, 4));
        // a run that wraps from the end of one row to the start of the next
        let wrap = CategoryBitmap::from_pixels(CAR, c, [(0, 9), (1, 0)]);
        assert_eq!(extract_bbox(&wrap).unwrap(), BoundingBox::new(CAR, 0, 0, 2, 10));
        assert_eq!(extract_bbox(&CategoryBitmap::empty(CAR, c)), Err(LayoutError::EmptyInstance(CAR)));
    }

    #[test]
    fn union_collapses_overlap() {
        let t = Taxonomy::cityscapes();
        let l = layout(
            Canvas::new(8, 8),
            vec![BoundingBox::new(CAR, 0, 0, 4, 4), BoundingBox::new(CAR, 2, 0, 4, 4)],
        );
        assert_eq!(l.category_union(&t, CAR).unwrap().cardinality(), 24);
        let m = rasterize_layout(&l, &t).unwrap();
        assert_eq!(m.category_union(&t, CAR).unwrap(), l.category_union(&t, CAR).unwrap());
        assert!(m.category_union(&t, PERSON).unwrap().is_empty());
        assert!(l.category_union(&t, CategoryId(200)).is_err());
    }

    #[test]
    fn segmap_union_is_channel_support() {
        let t = Taxonomy::cityscapes();
        let mut s = SegMap::filled(Canvas::new(5, 5), CategoryId(7));
        s.fill_rect(1, 1, 4, 3, CAR);
        let fg = s.foreground_map(&t);
        assert_eq!(s.category_union(&t, CAR).unwrap(), fg.category_union(&t, CAR).unwrap());
        assert_eq!(s.category_union(&t, CAR).unwrap().cardinality(), 6);
    }

    fn arb_box(canvas: Canvas) -> impl Strategy<Value = BoundingBox> {
        let (h, w) = (canvas.height as i32, canvas.width as i32);
        (0..3usize, -4..w, -4..h, 1..h + 4, 1..w + 4)
            .prop_map(|(k, x, y, bh, bw)| BoundingBox::new(CategoryId(24 + k as u8), x, y, bh, bw))
            .prop_filter("inside", move |b| b.clip(canvas).is_some())
    }

    const C: Canvas = Canvas::new(12, 17);

    proptest! {
        #[test]
        fn pixel_sums_match_containment(boxes in prop::collection::vec(arb_box(C), 1..6)) {
            let t = Taxonomy::cityscapes();
            let m = rasterize_layout(&layout(C, boxes.clone()), &t).unwrap();
            for r in 0..C.height {
                for c in 0..C.width {
                    let n = boxes.iter().filter(|b| b.contains(r, c)).count() as u32;
                    prop_assert_eq!(m.pixel_sum(r, c), n);
                    for (ch, cat) in t.foreground().iter().enumerate() {
                        let k = boxes.iter().filter(|b| b.category == cat.id && b.contains(r, c)).count();
                        prop_assert_eq!(m.get(r, c, ch) as usize, k);
                    }
                }
            }
        }

        #[test]
        fn rasterization_is_order_invariant(
            boxes in prop::collection::vec(arb_box(C), 1..6),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let t = Taxonomy::cityscapes();
            let mut shuffled = boxes.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                rasterize_layout(&layout(C, boxes), &t).unwrap(),
                rasterize_layout(&layout(C, shuffled), &t).unwrap()
            );
        }

        #[test]
        fn single_box_round_trip(b in arb_box(C)) {
            let t = Taxonomy::cityscapes();
            let m = rasterize_layout(&layout(C, vec![b]), &t).unwrap();
            let u = m.category_union(&t, b.category).unwrap();
            prop_assert_eq!(extract_bbox(&u).unwrap(), b.clipped(C).unwrap());
        }
    }
}
