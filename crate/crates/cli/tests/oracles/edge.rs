//! Brute-force edge detector: full 2D blur kernel, per-pixel gradient and
//! suppression, fixpoint hysteresis. Shares no code with `s2p_core::edge`.

#![allow(dead_code)]

pub struct OracleParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
    pub thin: bool,
}

fn px(img: &[f64], h: usize, w: usize, y: i64, x: i64) -> f64 {
    let y = y.clamp(0, h as i64 - 1) as usize;
    let x = x.clamp(0, w as i64 - 1) as usize;
    img[y * w + x]
}

/// Returns edge strengths in row-major order.
pub fn detect(gray: &[f64], h: usize, w: usize, p: &OracleParams) -> Vec<f64> {
    let r = (3.0 * p.sigma).ceil() as i64;
    let g = |d: i64| (-((d * d) as f64) / (2.0 * p.sigma * p.sigma)).exp();
    let norm: f64 = (-r..=r).map(g).sum();

    let mut blur = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for j in -r..=r {
                for i in -r..=r {
                    acc += g(i) * g(j) * px(gray, h, w, y + j, x + i);
                }
            }
            blur[y as usize * w + x as usize] = acc / (norm * norm);
        }
    }

    let mut mag = vec![0.0; h * w];
    let mut bin = vec![0usize; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let dx = (px(&blur, h, w, y, x + 1) - px(&blur, h, w, y, x - 1)) / 2.0;
            let dy = (px(&blur, h, w, y + 1, x) - px(&blur, h, w, y - 1, x)) / 2.0;
            let k = y as usize * w + x as usize;
            mag[k] = (2.0 * (dx * dx + dy * dy)).sqrt().min(1.0);
            let mut deg = dy.atan2(dx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            bin[k] = ((deg / 45.0).round() as usize) % 4;
        }
    }

    let get = |y: i64, x: i64| {
        if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
            mag[y as usize * w + x as usize]
        } else {
            0.0
        }
    };
    let mut nms = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let k = y as usize * w + x as usize;
            let (oy, ox) = [(0, 1), (1, 1), (1, 0), (1, -1)][bin[k]];
            let m = mag[k];
            let keep = m >= p.low && m >= get(y + oy, x + ox) - 1e-9 && m >= get(y - oy, x - ox) - 1e-9;
            if keep {
                nms[k] = m;
            }
        }
    }

    let strength = if p.thin { consolidate(&nms, h, w) } else { nms };

    let mut kept: Vec<bool> = strength.iter().map(|&s| s >= p.high).collect();
    loop {
        let mut grew = false;
        for k in 0..h * w {
            if kept[k] || strength[k] <= 0.0 {
                continue;
            }
            if neighbors(k, h, w).any(|n| kept[n]) {
                kept[k] = true;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    strength.iter().zip(&kept).map(|(&s, &k)| if k { s } else { 0.0 }).collect()
}

fn neighbors(k: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((k / w) as i64, (k % w) as i64);
    (-1..=1i64)
        .flat_map(move |dy| (-1..=1i64).map(move |dx| (y + dy, x + dx)))
        .filter(move |&(ny, nx)| ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64)
        .map(move |(ny, nx)| ny as usize * w + nx as usize)
}

fn consolidate(nms: &[f64], h: usize, w: usize) -> Vec<f64> {
    let on: Vec<bool> = nms.iter().map(|&v| v > 0.0).collect();
    let dil: Vec<bool> = (0..h * w).map(|k| neighbors(k, h, w).any(|n| on[n])).collect();
    let mut img: Vec<bool> = (0..h * w).map(|k| neighbors(k, h, w).all(|n| dil[n])).collect();

    let at = |img: &[bool], y: i64, x: i64| -> bool {
        y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && img[y as usize * w + x as usize]
    };
    loop {
        let before = img.clone();
        for step in 0..2 {
            let snapshot = img.clone();
            for k in 0..h * w {
                if !snapshot[k] {
                    continue;
                }
                let (y, x) = ((k / w) as i64, (k % w) as i64);
                let ring: Vec<bool> = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
                    .iter()
                    .map(|&(dy, dx)| at(&snapshot, y + dy, x + dx))
                    .collect();
                let b = ring.iter().filter(|&&v| v).count();
                let a = (0..8).filter(|&i| !ring[i] && ring[(i + 1) % 8]).count();
                let (n, e, s, wst) = (ring[0], ring[2], ring[4], ring[6]);
                let side = if step == 0 {
                    !(n && e && s) && !(e && s && wst)
                } else {
                    !(n && e && wst) && !(n && s && wst)
                };
                if (2..=6).contains(&b) && a == 1 && side {
                    img[k] = false;
                }
            }
        }
        if img == before {
            break;
        }
    }

    (0..h * w)
        .map(|k| if img[k] { neighbors(k, h, w).map(|n| nms[n]).fold(0.0, f64::max) } else { 0.0 })
        .collect()
}
