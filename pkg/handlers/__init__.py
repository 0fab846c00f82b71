# Command handlers and result reporting for the CLI
