from tensor_programs.cli import main

main()
