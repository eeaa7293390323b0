//! A move interrupted by a crash at any protocol step, on either side or
//! both, ends with exactly one live instance.

mod common;

use agentmesh::migration::MoveStep;
use common::{crash_scenario, Site};

macro_rules! scenario {
    ($name:ident, $step:ident, $site:ident) => {
        #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
        async fn $name() {
            if let Err(why) = crash_scenario(MoveStep::$step, Site::$site).await {
                panic!("{:?}/{:?}: {why}", MoveStep::$step, Site::$site);
            }
        }
    };
}

scenario!(initiated_source, Initiated, Source);
scenario!(initiated_dest, Initiated, Dest);
scenario!(initiated_both, Initiated, Both);
scenario!(prepared_source, Prepared, Source);
scenario!(prepared_dest, Prepared, Dest);
scenario!(prepared_both, Prepared, Both);
scenario!(decided_source, Decided, Source);
scenario!(decided_dest, Decided, Dest);
scenario!(decided_both, Decided, Both);
scenario!(activated_source, Activated, Source);
scenario!(activated_dest, Activated, Dest);
scenario!(activated_both, Activated, Both);
scenario!(finalized_source, Finalized, Source);
scenario!(finalized_dest, Finalized, Dest);
scenario!(finalized_both, Finalized, Both);

/// Where the survivor ends up depends only on whether the decision was
/// logged before the crash.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn survivor_side_follows_the_decision() {
    assert_eq!(crash_scenario(MoveStep::Prepared, Site::Both).await.unwrap(), 0);
    assert_eq!(crash_scenario(MoveStep::Decided, Site::Both).await.unwrap(), 1);
}
