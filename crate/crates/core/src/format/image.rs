//! Binary PGM (P5) and PPM (P6) images over categorical pixels.
//!
//! Category `c` of `C` maps to gray level `round(255·c/(C−1))`; reading maps a
//! gray level back to the nearest category. PPM images are flattened
//! channel-major: variable `ch·H·W + r·W + c`.

use std::io::{BufRead, Write};

use super::FormatError;

fn cat_to_gray(c: u16, num_cats: usize) -> u8 {
    if num_cats <= 1 {
        return 0;
    }
    ((c as f64) * 255.0 / (num_cats - 1) as f64).round() as u8
}

fn gray_to_cat(g: u8, num_cats: usize) -> u16 {
    if num_cats <= 1 {
        return 0;
    }
    ((g as f64) * (num_cats - 1) as f64 / 255.0).round() as u16
}

pub fn write_pgm(w: &mut impl Write, height: usize, width: usize, pixels: &[u16], num_cats: usize) -> Result<(), FormatError> {
    if pixels.len() != height * width {
        return Err(FormatError::Malformed("pixel count does not match dimensions".into()));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().map(|&c| cat_to_gray(c, num_cats)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Gray levels in `[0, 1]`, written without quantizing to categories.
pub fn write_pgm_gray(w: &mut impl Write, height: usize, width: usize, gray: &[f64]) -> Result<(), FormatError> {
    if gray.len() != height * width {
        return Err(FormatError::Malformed("pixel count does not match dimensions".into()));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = gray.iter().map(|g| (g.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Returns `(height, width, pixels)`.
pub fn read_pgm(r: &mut impl BufRead, num_cats: usize) -> Result<(usize, usize, Vec<u16>), FormatError> {
    let (magic, width, height) = read_header(r)?;
    if magic != "P5" {
        return Err(FormatError::Malformed(format!("expected P5, found {magic}")));
    }
    let mut buf = vec![0u8; width * height];
    r.read_exact(&mut buf)?;
    Ok((height, width, buf.into_iter().map(|g| gray_to_cat(g, num_cats)).collect()))
}

pub fn write_ppm(w: &mut impl Write, height: usize, width: usize, vars: &[u16], num_cats: usize) -> Result<(), FormatError> {
    let plane = height * width;
    if vars.len() != 3 * plane {
        return Err(FormatError::Malformed("expected three channel planes".into()));
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push(cat_to_gray(vars[ch * plane + p], num_cats));
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(r: &mut impl BufRead, num_cats: usize) -> Result<(usize, usize, Vec<u16>), FormatError> {
    let (magic, width, height) = read_header(r)?;
    if magic != "P6" {
        return Err(FormatError::Malformed(format!("expected P6, found {magic}")));
    }
    let plane = width * height;
    let mut buf = vec![0u8; 3 * plane];
    r.read_exact(&mut buf)?;
    let mut vars = vec![0u16; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            vars[ch * plane + p] = gray_to_cat(buf[3 * p + ch], num_cats);
        }
    }
    Ok((height, width, vars))
}

fn read_header(r: &mut impl BufRead) -> Result<(String, usize, usize), FormatError> {
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut tok = Vec::new();
        // skip whitespace and comments
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            match b[0] {
                b'#' => {
                    let mut line = String::new();
                    r.read_line(&mut line)?;
                }
                c if c.is_ascii_whitespace() => {
                    if !tok.is_empty() {
                        break;
                    }
                }
                c => tok.push(c),
            }
        }
        tokens.push(String::from_utf8_lossy(&tok).into_owned());
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| FormatError::Malformed(format!("bad header field {s:?}")));
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    if parse(&tokens[3])? != 255 {
        return Err(FormatError::Malformed("only maxval 255 is supported".into()));
    }
    Ok((tokens[0].clone(), width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trips_bytes() {
        let px: Vec<u16> = (0..12).map(|i| (i % 4) as u16).collect();
        let mut a = Vec::new();
        write_pgm(&mut a, 3, 4, &px, 4).unwrap();
        let (h, w, back) = read_pgm(&mut a.as_slice(), 4).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, px);
        let mut b = Vec::new();
        write_pgm(&mut b, h, w, &back, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ppm_is_channel_major() {
        let vars: Vec<u16> = vec![1, 1, 0, 0, 1, 0];
        let mut a = Vec::new();
        write_ppm(&mut a, 1, 2, &vars, 2).unwrap();
        assert_eq!(&a[a.len() - 6..], &[255, 0, 255, 255, 0, 0]);
        let (_, _, back) = read_ppm(&mut a.as_slice(), 2).unwrap();
        assert_eq!(back, vars);
    }

    #[test]
    fn header_comments_are_skipped() {
        let data = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let (h, w, px) = read_pgm(&mut &data[..], 2).unwrap();
        assert_eq!((h, w, px), (1, 2, vec![0, 1]));
    }
}
