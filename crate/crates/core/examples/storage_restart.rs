//! A directory-backed storage node keeps its namespace journal and page
//! files across a restart.

use leasefs::storage::{parse_journal_line, StorageNode, JOURNAL_FILE};
use leasefs::types::PageData;

pub fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("leasefs-restart-{}", std::process::id()));
    {
        let node = StorageNode::open_dir(0, &dir)?;
        let gfi = node.create("kept")?;
        node.write_pages(gfi, &[(0, PageData::patterned(7)), (3, PageData::patterned(8))])?;
        println!("wrote {gfi} pages 0 and 3");
    }
    let node = StorageNode::open_dir(0, &dir)?;
    let (gfi, len) = node.resolve("kept")?;
    let pages = node.read_pages(gfi, &[0, 1, 3])?;
    println!("after restart: {gfi} length {len}");
    println!("page 0 intact: {}", pages[0] == PageData::patterned(7));
    println!("page 1 is a hole: {}", pages[1].is_zero());
    println!("page 3 intact: {}", pages[2] == PageData::patterned(8));
    for line in std::fs::read_to_string(dir.join(JOURNAL_FILE))?.lines() {
        println!("journal: {:?}", parse_journal_line(line));
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
