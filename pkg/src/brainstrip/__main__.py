from brainstrip.cli import main

main()
