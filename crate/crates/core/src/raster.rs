//! ESRI ASCII grids, validity masks, the 3-channel model input and the
//! reflect padding used by tiled inference.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Georeferenced single-band grid. Row 0 is the northern (top) row.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    rows: usize,
    cols: usize,
    pub cell_size: f64,
    /// Lower-left corner in map coordinates.
    pub origin_x: f64,
    pub origin_y: f64,
    pub nodata: f32,
    values: Vec<f32>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize, cell_size: f64, nodata: f32, values: Vec<f32>) -> Result<Self> {
        Self::with_origin(rows, cols, cell_size, 0.0, 0.0, nodata, values)
    }

    pub fn with_origin(
        rows: usize,
        cols: usize,
        cell_size: f64,
        origin_x: f64,
        origin_y: f64,
        nodata: f32,
        mut values: Vec<f32>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("empty raster".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "value count mismatch: {} values for {rows}x{cols}",
                values.len()
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Config(format!("cell size must be positive, got {cell_size}")));
        }
        if !nodata.is_finite() {
            return Err(Error::Config("nodata sentinel must be finite".into()));
        }
        for v in values.iter_mut() {
            if !v.is_finite() {
                *v = nodata;
            }
        }
        Ok(Self {
            rows,
            cols,
            cell_size,
            origin_x,
            origin_y,
            nodata,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn is_nodata(&self, idx: usize) -> bool {
        self.values[idx] == self.nodata
    }

    /// Same georeferencing, new values; non-finite values become nodata.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::with_origin(
            self.rows,
            self.cols,
            self.cell_size,
            self.origin_x,
            self.origin_y,
            self.nodata,
            values,
        )
    }

    pub fn as_grid(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.rows, self.cols], self.values.clone()).expect("raster invariant")
    }
}

/// True where a grid point carries data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl ValidityMask {
    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Cell-wise AND of two equally sized masks.
    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(ValidityMask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Channels: 0 elevation (nodata filled), 1 broadcast discharge, 2 mask as 0/1.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStack {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl InputStack {
    pub const CHANNELS: usize = 3;

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.rows * self.cols;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.rows * self.cols;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn discharge(&self) -> f32 {
        self.data[self.rows * self.cols]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.channel(2).iter().map(|&v| v > 0.5).collect()
    }
}

fn grid_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Grid {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cellsize = None;
    let mut nodata = None;
    let mut center_registered = false;

    for _ in 0..6 {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let mut tokens = line.split_whitespace();
        let (Some(key), Some(value), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            return Err(grid_err(path, format!("malformed header line {:?}", line.trim_end())));
        };
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| grid_err(path, format!("non-numeric header value {v:?} for {key}")))
        };
        let count = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| grid_err(path, format!("invalid {key} {v:?}")))
        };
        match key.to_ascii_lowercase().as_str() {
            "ncols" => ncols = Some(count(value)?),
            "nrows" => nrows = Some(count(value)?),
            "xllcorner" => xll = Some(num(value)?),
            "yllcorner" => yll = Some(num(value)?),
            "xllcenter" => {
                xll = Some(num(value)?);
                center_registered = true;
            }
            "yllcenter" => yll = Some(num(value)?),
            "cellsize" => cellsize = Some(num(value)?),
            "nodata_value" => nodata = Some(num(value)?),
            other => return Err(grid_err(path, format!("unknown header key {other:?}"))),
        }
    }

    let missing = |k: &str| grid_err(path, format!("malformed header: missing {k}"));
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let mut xll = xll.ok_or_else(|| missing("xllcorner"))?;
    let mut yll = yll.ok_or_else(|| missing("yllcorner"))?;
    let cellsize = cellsize.ok_or_else(|| missing("cellsize"))?;
    let nodata = nodata.ok_or_else(|| missing("NODATA_value"))? as f32;
    if center_registered {
        xll -= cellsize / 2.0;
        yll -= cellsize / 2.0;
    }

    let mut body = String::new();
    reader.read_to_string(&mut body).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::with_capacity(nrows * ncols);
    for token in body.split_whitespace() {
        let v: f32 = token
            .parse()
            .map_err(|_| grid_err(path, format!("non-numeric token {token:?}")))?;
        values.push(v);
    }
    if values.len() != nrows * ncols {
        return Err(grid_err(
            path,
            format!("value count mismatch: header says {}x{}, body has {}", nrows, ncols, values.len()),
        ));
    }
    Raster::with_origin(nrows, ncols, cellsize, xll, yll, nodata, values).map_err(|e| grid_err(path, e.to_string()))
}

pub fn write_ascii_grid(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if raster.rows == 0 || raster.cols == 0 {
        return Err(Error::Shape("empty raster".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "ncols {}", raster.cols).map_err(io)?;
    writeln!(w, "nrows {}", raster.rows).map_err(io)?;
    writeln!(w, "xllcorner {}", raster.origin_x).map_err(io)?;
    writeln!(w, "yllcorner {}", raster.origin_y).map_err(io)?;
    writeln!(w, "cellsize {}", raster.cell_size).map_err(io)?;
    writeln!(w, "NODATA_value {}", raster.nodata).map_err(io)?;
    // shortest round-trip formatting keeps f32 values bit-exact
    let mut line = String::new();
    for row in raster.values.chunks(raster.cols) {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn build_validity_mask(raster: &Raster) -> ValidityMask {
    ValidityMask {
        rows: raster.rows,
        cols: raster.cols,
        bits: raster
            .values
            .iter()
            .map(|&v| v.is_finite() && v != raster.nodata)
            .collect(),
    }
}

/// Builds the 3-channel input. Nodata elevations are filled with the
/// minimum valid elevation of the domain (0 if no cell is valid).
pub fn stack_input_channels(dem: &Raster, discharge: f32, mask: &ValidityMask) -> Result<InputStack> {
    if (dem.rows, dem.cols) != (mask.rows, mask.cols) {
        return Err(Error::Shape(format!(
            "dem {}x{} vs mask {}x{}",
            dem.rows, dem.cols, mask.rows, mask.cols
        )));
    }
    let hw = dem.rows * dem.cols;
    let dem_valid = |v: f32| v.is_finite() && v != dem.nodata;
    let fill = dem
        .values
        .iter()
        .copied()
        .filter(|&v| dem_valid(v))
        .fold(None, |acc: Option<f32>, v| Some(acc.map_or(v, |a| a.min(v))))
        .unwrap_or(0.0);
    let mut data = Vec::with_capacity(3 * hw);
    data.extend(dem.values.iter().map(|&v| if dem_valid(v) { v } else { fill }));
    data.extend(std::iter::repeat_n(discharge, hw));
    data.extend(mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    Ok(InputStack {
        rows: dem.rows,
        cols: dem.cols,
        data,
    })
}

/// Mirror index without repeating the edge; any offset is folded back into
/// `0..n` so pads larger than the grid are handled by repeated reflection.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads a 2-D grid. Each pad must be smaller than the matching dimension.
pub fn reflect_pad(grid: &Tensor<f32>, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<f32>> {
    let [h, w] = grid.shape() else {
        return Err(Error::Shape(format!("reflect_pad expects a 2-d grid, got {:?}", grid.shape())));
    };
    let (h, w) = (*h, *w);
    if top.max(bottom) >= h || left.max(right) >= w {
        return Err(Error::Shape(format!(
            "pad ({top},{bottom},{left},{right}) must be smaller than grid {h}x{w}"
        )));
    }
    let planes = reflect_pad_planes(grid.data(), 1, h, w, top, bottom, left, right);
    Tensor::from_vec(&[h + top + bottom, w + left + right], planes)
}

/// Reflect-pads `channels` stacked planes of `h x w`, folding pads of any size.
#[allow(clippy::too_many_arguments)]
pub fn reflect_pad_planes(
    data: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Vec<f32> {
    let (ph, pw) = (h + top + bottom, w + left + right);
    let col_src: Vec<usize> = (0..pw).map(|x| reflect_index(x as isize - left as isize, w)).collect();
    let mut out = Vec::with_capacity(channels * ph * pw);
    for c in 0..channels {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for y in 0..ph {
            let sy = reflect_index(y as isize - top as isize, h);
            let row = &plane[sy * w..(sy + 1) * w];
            out.extend(col_src.iter().map(|&sx| row[sx]));
        }
    }
    out
}

/// Writes a binary 8-bit graymap; `lo` maps to 0 and `hi` to 255.
pub fn write_pgm(grid: &Tensor<f32>, path: impl AsRef<Path>, lo: f32, hi: f32) -> Result<()> {
    let path = path.as_ref();
    if !(hi > lo) {
        return Err(Error::Config(format!("pgm range needs hi > lo, got [{lo}, {hi}]")));
    }
    let [h, w] = grid.shape() else {
        return Err(Error::Shape(format!("pgm expects a 2-d grid, got {:?}", grid.shape())));
    };
    let pixels = pgm_pixels(grid.data(), lo, hi);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(out, "P5\n{w} {h}\n255\n").map_err(io)?;
    out.write_all(&pixels).map_err(io)?;
    out.flush().map_err(io)
}

pub(crate) fn pgm_pixels(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let (lo, hi) = (lo as f64, hi as f64);
    values
        .iter()
        .map(|&v| {
            let t = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
            // NaN clamps to NaN; render as black
            if t.is_nan() {
                0
            } else {
                (255.0 * t + 0.5).floor() as u8
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const HEADER_2X2: &str = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n";

    #[test]
    fn reads_small_grid() {
        let d = tmp();
        let p = write(d.path(), "a.asc", &format!("{HEADER_2X2}1 2\n3 4\n"));
        let r = read_ascii_grid(&p).unwrap();
        assert_eq!((r.rows(), r.cols()), (2, 2));
        assert_eq!(r.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn value_count_mismatch_is_an_error() {
        let d = tmp();
        let p = write(d.path(), "a.asc", &format!("{HEADER_2X2}1 2 3\n"));
        let err = read_ascii_grid(&p).unwrap_err().to_string();
        assert!(err.contains("value count mismatch"), "{err}");
    }

    #[test]
    fn malformed_header_and_tokens() {
        let d = tmp();
        let p = write(d.path(), "a.asc", "ncols 2\nnrows\n");
        assert!(read_ascii_grid(&p).is_err());
        let p = write(d.path(), "b.asc", &format!("{HEADER_2X2}1 2\n3 x\n"));
        assert!(read_ascii_grid(&p).unwrap_err().to_string().contains("non-numeric"));
    }

    #[test]
    fn nodata_cell_maps_to_invalid_mask() {
        let d = tmp();
        let p = write(d.path(), "a.asc", &format!("{HEADER_2X2}1 -9999\n3 4\n"));
        let r = read_ascii_grid(&p).unwrap();
        assert!(r.is_nodata(1));
        assert_eq!(build_validity_mask(&r).bits, vec![true, false, true, true]);
    }

    #[test]
    fn round_trip_preserves_header_and_values() {
        let d = tmp();
        let r = Raster::with_origin(2, 3, 0.5, 361000.25, 5679000.5, -9999.0, vec![1.5, -2.25, 3e-7, 183.25, -9999.0, 226.39]).unwrap();
        let p = d.path().join("r.asc");
        write_ascii_grid(&r, &p).unwrap();
        let back = read_ascii_grid(&p).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn all_nodata_writes_sentinels() {
        let d = tmp();
        let r = Raster::new(2, 2, 1.0, -9999.0, vec![f32::NAN; 4]).unwrap();
        let p = d.path().join("r.asc");
        write_ascii_grid(&r, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let body: Vec<&str> = text.lines().skip(6).flat_map(|l| l.split_whitespace()).collect();
        assert_eq!(body, vec!["-9999"; 4]);
        assert_eq!(build_validity_mask(&r).count_valid(), 0);
    }

    #[test]
    fn empty_raster_rejected() {
        let err = Raster::new(0, 2, 1.0, -9999.0, vec![]).unwrap_err();
        assert!(err.to_string().contains("empty raster"));
    }

    #[test]
    fn stack_broadcasts_discharge_and_fills_nodata() {
        let dem = Raster::new(2, 2, 1.0, -9999.0, vec![5.0, -9999.0, 3.5, 7.0]).unwrap();
        let mask = build_validity_mask(&dem);
        let s = stack_input_channels(&dem, 65.0, &mask).unwrap();
        assert_eq!(s.channel(1), &[65.0; 4]);
        assert_eq!(s.channel(0), &[5.0, 3.5, 3.5, 7.0]);
        assert_eq!(s.channel(2), &[1.0, 0.0, 1.0, 1.0]);
        let full = ValidityMask { rows: 2, cols: 2, bits: vec![true; 4] };
        assert_eq!(stack_input_channels(&dem, 1.0, &full).unwrap().channel(2), &[1.0; 4]);
        let wrong = ValidityMask { rows: 1, cols: 4, bits: vec![true; 4] };
        assert!(stack_input_channels(&dem, 1.0, &wrong).is_err());
    }

    #[test]
    fn reflect_pad_row() {
        let g = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        // a 1-row grid cannot be padded vertically, so pad only columns
        let p = reflect_pad(&g, 0, 0, 1, 1).unwrap();
        assert_eq!(p.data(), &[2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(reflect_pad(&g, 0, 0, 0, 0).unwrap(), g);
        assert!(reflect_pad(&g, 0, 0, 3, 0).is_err());
    }

    #[test]
    fn reflect_pad_corners() {
        let g = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = reflect_pad(&g, 1, 1, 1, 1).unwrap();
        // mirror indices: padded row/col -1 -> 1, 2 -> 0
        #[rustfmt::skip]
        let want = [
            4.0, 3.0, 4.0, 3.0,
            2.0, 1.0, 2.0, 1.0,
            4.0, 3.0, 4.0, 3.0,
            2.0, 1.0, 2.0, 1.0,
        ];
        assert_eq!(p.data(), &want);
        assert_eq!((p[0], p[3], p[12], p[15]), (4.0, 3.0, 2.0, 1.0));
    }

    #[test]
    fn reflect_index_folds_large_offsets() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(got, vec![0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2, 1]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn pgm_mapping() {
        assert_eq!(pgm_pixels(&[0.0, 1.0, 0.5, -3.0, 9.0], 0.0, 1.0), vec![0, 255, 128, 0, 255]);
        let d = tmp();
        let g = Tensor::full(&[2, 3], 2.0f32);
        let p = d.path().join("a.pgm");
        write_pgm(&g, &p, -2.0, 2.0).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255u8; 6]);
        assert!(write_pgm(&g, &p, 1.0, 1.0).is_err());
    }
}
