use std::collections::VecDeque;

/// Labels the 8-connected components of `mask` (`h x w`, row-major) where
/// `joined(p, q)` decides whether adjacent foreground pixels `p` and `q`
/// (flat indices) belong together. Labels count up from 0 in raster order of
/// each component's first pixel.
pub fn flood_fill_cc(mask: &[bool], h: usize, w: usize, joined: impl Fn(usize, usize) -> bool) -> Vec<Option<usize>> {
    assert_eq!(mask.len(), h * w, "mask size");
    let mut labels = vec![None; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q].is_none() && joined(p, q) {
                        labels[q] = Some(next);
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_connect() {
        let mask = [true, false, false, true];
        assert_eq!(flood_fill_cc(&mask, 2, 2, |_, _| true), vec![Some(0), None, None, Some(0)]);
        assert_eq!(flood_fill_cc(&mask, 2, 2, |_, _| false), vec![Some(0), None, None, Some(1)]);
    }
}
