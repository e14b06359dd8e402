//! Bilinear resize with half-pixel centers (align-corners off).

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn resize_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = (1.0 - b.frac) * r0[b.lo] + b.frac * r0[b.hi];
                let bot = (1.0 - b.frac) * r1[b.lo] + b.frac * r1[b.hi];
                dst[oy * ow + ox] = (1.0 - a.frac) * top + a.frac * bot;
            }
        }
    }
    out
}

pub fn resize_backward(gout: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let go = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                let gt = (1.0 - a.frac) * g;
                let gb = a.frac * g;
                dst[a.lo * w + b.lo] += (1.0 - b.frac) * gt;
                dst[a.lo * w + b.hi] += b.frac * gt;
                dst[a.hi * w + b.lo] += (1.0 - b.frac) * gb;
                dst[a.hi * w + b.hi] += b.frac * gb;
            }
        }
    }
    gx
}
