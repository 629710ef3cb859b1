use ibev_core::occ_head::OccupancyGrid;

/// Binary (P5) grayscale image of one z slice: prediction on the left,
/// reference on the right, a white column between. Free is black; classes
/// spread evenly up to 255. Rows run along y, columns along x.
pub fn slice_pair(pred: &OccupancyGrid, gt: &OccupancyGrid, z: usize) -> Vec<u8> {
    let [nx, ny, _] = pred.geometry.dims;
    let width = 2 * nx + 1;
    let shade = |c: u8, classes: usize| ((c as usize * 255) / (classes - 1).max(1)) as u8;
    let mut out = format!("P5\n{width} {ny}\n255\n").into_bytes();
    for y in (0..ny).rev() {
        for x in 0..nx {
            out.push(shade(pred.get(x, y, z), pred.classes));
        }
        out.push(255);
        for x in 0..nx {
            out.push(shade(gt.get(x, y, z), gt.classes));
        }
    }
    out
}
