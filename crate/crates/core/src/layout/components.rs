use std::collections::VecDeque;

use super::{extract_bbox, BoundingBox, CategoryBitmap, CategoryId, SalientLayout, SegMap, Taxonomy};

/// Components with fewer pixels are dropped.
pub const DEFAULT_MIN_COMPONENT_AREA: usize = 16;

/// One box per 4-connected foreground component, with the default area threshold.
pub fn boxes_from_segmap(segmap: &SegMap, taxonomy: &Taxonomy) -> SalientLayout {
    boxes_from_segmap_min_area(segmap, taxonomy, DEFAULT_MIN_COMPONENT_AREA)
}

/// Boxes come out grouped by foreground channel, then in raster order of each
/// component's first pixel.
pub fn boxes_from_segmap_min_area(segmap: &SegMap, taxonomy: &Taxonomy, min_area: usize) -> SalientLayout {
    let canvas = segmap.canvas();
    let (h, w) = (canvas.height, canvas.width);
    let data = segmap.data();
    let mut seen = vec![false; data.len()];
    let mut found: Vec<(usize, usize, BoundingBox)> = Vec::new();
    let mut queue = VecDeque::new();
    let mut members = Vec::new();

    for start in 0..data.len() {
        if seen[start] {
            continue;
        }
        let id = data[start];
        let Some(channel) = taxonomy.foreground_index(CategoryId(id)) else {
            continue;
        };
        seen[start] = true;
        queue.push_back(start);
        members.clear();
        while let Some(p) = queue.pop_front() {
            members.push(p);
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && data[q] == id {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if members.len() < min_area {
            continue;
        }
        let bitmap = CategoryBitmap::from_pixels(CategoryId(id), canvas, members.iter().map(|&p| (p / w, p % w)));
        let b = extract_bbox(&bitmap).expect("component is non-empty");
        found.push((channel, start, b));
    }
    found.sort_by_key(|&(channel, start, _)| (channel, start));
    SalientLayout::new(canvas, taxonomy.name(), found.into_iter().map(|(_, _, b)| b).collect())
}

#[cfg(test)]
mod tests {
    use super::super::{rasterize_layout, Canvas};
    use super::*;

    const CAR: CategoryId = CategoryId(26);
    const ROAD: CategoryId = CategoryId(7);

    #[test]
    fn rectangle_gives_its_bounds() {
        let t = Taxonomy::cityscapes();
        let mut s = SegMap::filled(Canvas::new(20, 20), ROAD);
        s.fill_rect(2, 3, 8, 10, CAR);
        let l = boxes_from_segmap(&s, &t);
        assert_eq!(l.boxes, vec![BoundingBox::new(CAR, 3, 2, 6, 7)]);
        assert_eq!(l.taxonomy, "cityscapes");
    }

    #[test]
    fn diagonal_contact_is_two_components() {
        let t = Taxonomy::cityscapes();
        let mut s = SegMap::filled(Canvas::new(10, 10), ROAD);
        s.fill_rect(0, 0, 4, 4, CAR);
        s.fill_rect(4, 4, 8, 8, CAR);
        let l = boxes_from_segmap(&s, &t);
        assert_eq!(l.boxes, vec![BoundingBox::new(CAR, 0, 0, 4, 4), BoundingBox::new(CAR, 4, 4, 4, 4)]);
    }

    #[test]
    fn small_components_dropped() {
        let t = Taxonomy::cityscapes();
        let mut s = SegMap::filled(Canvas::new(10, 10), ROAD);
        s.fill_rect(0, 0, 3, 5, CAR);
        assert!(boxes_from_segmap(&s, &t).boxes.is_empty());
        assert_eq!(boxes_from_segmap_min_area(&s, &t, 15).boxes.len(), 1);
    }

    #[test]
    fn recovers_disjoint_rasterized_boxes() {
        let t = Taxonomy::cityscapes();
        let c = Canvas::new(32, 48);
        let boxes = vec![
            BoundingBox::new(CAR, 1, 1, 5, 7),
            BoundingBox::new(CAR, 20, 3, 9, 4),
            BoundingBox::new(CategoryId(24), 30, 20, 10, 10),
            BoundingBox::new(CAR, 2, 15, 6, 6),
        ];
        let fg = rasterize_layout(&SalientLayout::new(c, "cityscapes", boxes.clone()), &t).unwrap();
        let mut s = SegMap::filled(c, ROAD);
        for r in 0..c.height {
            for col in 0..c.width {
                if let Some(ch) = fg.pixel(r, col).iter().position(|&v| v > 0) {
                    s.set(r, col, t.foreground()[ch].id);
                }
            }
        }
        let mut got = boxes_from_segmap(&s, &t).boxes;
        let mut want = boxes;
        got.sort_by_key(|b| (b.category, b.y, b.x));
        want.sort_by_key(|b| (b.category, b.y, b.x));
        assert_eq!(got, want);
    }
}
