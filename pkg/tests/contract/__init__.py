# Artifact and file-format contract tests
