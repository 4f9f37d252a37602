//! Maps group addresses onto the rendezvous-region grid and shows which
//! region a few positions fall in.

use mcastsim::rendezvous::AddressGrid;
use mcastsim::{GroupAddress, Position};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = AddressGrid::new(3000.0, 1500.0, 6, 3, 8, 16)?;
    println!("{} regions ({} x {}), {} suffixes per prefix", grid.region_count(), grid.cols(), grid.rows(), grid.max_suffix());
    for r in grid.regions().take(4) {
        let c = r.rect.center();
        println!("  prefix {:>2}: [{:.0},{:.0}]..[{:.0},{:.0}] centre ({:.0},{:.0})", r.prefix, r.rect.x1, r.rect.y1, r.rect.x2, r.rect.y2, c.x, c.y);
    }
    for g in [GroupAddress::new(0, 7), GroupAddress::new(9, 1), GroupAddress::new(17, 3)] {
        let rr = grid.rr_of_group(g);
        println!("group {g} -> rendezvous region {}", rr.prefix);
    }
    for p in [Position::new(10.0, 10.0), Position::new(1499.0, 760.0), Position::new(3000.0, 1500.0)] {
        println!("({:.0},{:.0}) lies in prefix {}", p.x, p.y, grid.prefix_of_position(&p));
    }
    Ok(())
}
