use super::BoundaryMap;

/// Thresholds `map` at `threshold` (keeping values ≥ threshold) and thins the
/// result to one-pixel-wide curves.
pub fn boundary_thin(map: &BoundaryMap, threshold: f64) -> BoundaryMap {
    let mut mask = map.mask_at(threshold);
    thin_mask(&mut mask, map.width(), map.height());
    BoundaryMap::from_mask(map.width(), map.height(), &mask)
}

/// Two-subiteration parallel thinning (Guo-Hall conditions as used by the
/// common `thin` morphology operator), iterated to a fixed point.
pub fn thin_mask(mask: &mut [bool], width: usize, height: usize) {
    debug_assert_eq!(mask.len(), width * height);
    let mut deletions = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            deletions.clear();
            for y in 0..height {
                for x in 0..width {
                    if mask[y * width + x] && deletable(mask, width, height, x, y, pass) {
                        deletions.push(y * width + x);
                    }
                }
            }
            for &i in &deletions {
                mask[i] = false;
            }
            changed |= !deletions.is_empty();
        }
        if !changed {
            break;
        }
    }
}

#[inline]
fn deletable(mask: &[bool], w: usize, h: usize, x: usize, y: usize, pass: usize) -> bool {
    let at = |dx: isize, dy: isize| -> bool {
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && mask[ny as usize * w + nx as usize]
    };
    // x1..x8: east first, counter-clockwise (north is y-1).
    let n = [
        at(1, 0),
        at(1, -1),
        at(0, -1),
        at(-1, -1),
        at(-1, 0),
        at(-1, 1),
        at(0, 1),
        at(1, 1),
    ];
    let x_ = |k: usize| n[(k - 1) % 8];

    let crossing: usize = (1..=4)
        .filter(|&i| !x_(2 * i - 1) && (x_(2 * i) || x_(2 * i + 1)))
        .count();
    if crossing != 1 {
        return false;
    }
    let n1: usize = (1..=4).filter(|&k| x_(2 * k - 1) || x_(2 * k)).count();
    let n2: usize = (1..=4).filter(|&k| x_(2 * k) || x_(2 * k + 1)).count();
    let m = n1.min(n2);
    if !(2..=3).contains(&m) {
        return false;
    }
    if pass == 0 {
        !((x_(2) || x_(3) || !x_(8)) && x_(1))
    } else {
        !((x_(6) || x_(7) || !x_(4)) && x_(5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_rows(rows: &[&str]) -> BoundaryMap {
        let h = rows.len();
        let w = rows[0].len();
        let mut v = Vec::new();
        for r in rows {
            for c in r.chars() {
                v.push(if c == '#' { 1.0 } else { 0.0 });
            }
        }
        BoundaryMap::new(w, h, v).unwrap()
    }

    #[test]
    fn one_pixel_curve_is_unchanged() {
        let m = from_rows(&[
            "........", "..#.....", "..#.....", "...#....", "....#...", "....#...", "....#...",
            "........",
        ]);
        assert_eq!(boundary_thin(&m, 0.5), m);
    }

    #[test]
    fn three_wide_bar_becomes_centre_line() {
        let mut v = vec![0.0; 9 * 12];
        for y in 1..11 {
            for x in 3..6 {
                v[y * 9 + x] = 1.0;
            }
        }
        let m = BoundaryMap::new(9, 12, v).unwrap();
        let t = boundary_thin(&m, 0.5);
        // Golden output: the centre column, shortened by one pixel at each end.
        let mut expect = vec![0.0; 9 * 12];
        for y in 2..10 {
            expect[y * 9 + 4] = 1.0;
        }
        assert_eq!(t.values(), &expect[..]);
    }

    #[test]
    fn below_threshold_is_empty() {
        let m = BoundaryMap::new(3, 3, vec![0.3; 9]).unwrap();
        assert_eq!(boundary_thin(&m, 0.5).count_nonzero(), 0);
    }

    #[test]
    fn two_wide_line_collapses() {
        let mut v = vec![0.0; 10 * 10];
        for y in 1..9 {
            v[y * 10 + 4] = 1.0;
            v[y * 10 + 5] = 1.0;
        }
        let t = boundary_thin(&BoundaryMap::new(10, 10, v).unwrap(), 0.5);
        for y in 0..10 {
            let row: usize = (0..10).filter(|&x| t.get(x, y) > 0.0).count();
            assert!(row <= 1);
        }
        assert!(t.count_nonzero() >= 6);
    }

    proptest! {
        #[test]
        fn thinning_is_idempotent(bits in proptest::collection::vec(any::<bool>(), 100)) {
            let m = BoundaryMap::from_mask(10, 10, &bits);
            let once = boundary_thin(&m, 0.5);
            let twice = boundary_thin(&once, 0.5);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn raising_threshold_never_adds_pixels(vals in proptest::collection::vec(0.0f64..=1.0, 64), t in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let m = BoundaryMap::new(8, 8, vals).unwrap();
            let lo = m.mask_at(t);
            let hi = m.mask_at((t + dt).min(1.0));
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(!b || *a);
            }
        }
    }
}
