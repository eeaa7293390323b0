fn main() -> std::process::ExitCode {
    agentmesh::client::cli::run()
}
